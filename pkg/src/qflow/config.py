"""Experiment configuration: sectioned ``key = value`` files with typed keys.

A file looks like::

    [env]
    type = hypergrid
    H = 8
    D = 2

    [run]
    algo = qm
    seeds = 0, 1, 2, 3

Every key is addressed by its dotted name (``env.H``, ``qm.N``, ``run.algo``).
Unknown keys and out-of-range values are rejected at parse time with a
:class:`ConfigError` naming the key and, when it came from a file, the line.
"""
from __future__ import annotations

import configparser
import logging
import math
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Callable

import numpy as np

from .env import Env, two_arm_env
from .hypergrid import Hypergrid, HypergridConfig, RiskyConfig, RiskyHypergrid
from .quantile import DistortionMeasure
from .seqgen import SeqConfig, SeqEnv, build_targets
from .trainer import Agent, FMAgent, QMAgent, TBAgent, TrainConfig


log = logging.getLogger(__name__)


class ConfigError(ValueError):
    def __init__(self, key: str, message: str, source: str | None = None, line: int | None = None):
        self.key, self.source, self.line = key, source, line
        where = ""
        if source is not None:
            where = f"{source}:{line}: " if line is not None else f"{source}: "
        super().__init__(f"{where}{key}: {message}")


# -- value types -------------------------------------------------------------------

def _int(lo=None, hi=None):
    def parse(text):
        try:
            v = int(text)
        except ValueError:
            raise ValueError(f"expected an integer, got {text!r}") from None
        _check_range(v, lo, hi)
        return v
    return parse


def _float(lo=None, hi=None, lo_open=False):
    def parse(text):
        try:
            v = float(text)
        except ValueError:
            raise ValueError(f"expected a number, got {text!r}") from None
        if not math.isfinite(v):
            raise ValueError("value must be finite")
        if lo_open and lo is not None and not v > lo:
            raise ValueError(f"must be > {lo}")
        _check_range(v, None if lo_open else lo, hi)
        return v
    return parse


def _check_range(v, lo, hi):
    if lo is not None and v < lo:
        raise ValueError(f"must be >= {lo}")
    if hi is not None and v > hi:
        raise ValueError(f"must be <= {hi}")


def _choice(*options):
    def parse(text):
        if text not in options:
            raise ValueError(f"expected one of {', '.join(options)}; got {text!r}")
        return text
    return parse


def _bool(text):
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _int_list(text):
    try:
        vals = [int(t) for t in re.split(r"[,\s]+", text.strip()) if t]
    except ValueError:
        raise ValueError(f"expected a comma-separated list of integers, got {text!r}") from None
    if not vals:
        raise ValueError("list is empty")
    if any(v < 0 for v in vals):
        raise ValueError("seeds must be nonnegative")
    return tuple(vals)


def _targets(text):
    text = text.strip()
    if text == "blocks":
        return "blocks"
    vals = tuple(t for t in re.split(r"[,\s]+", text) if t)
    if not vals or any(set(v) - {"0", "1"} for v in vals):
        raise ValueError("expected 'blocks' or a comma-separated list of binary strings")
    return vals


@dataclass(frozen=True)
class Key:
    parse: Callable
    default: Any
    help: str


SCHEMA: dict[str, Key] = {
    "env.type": Key(_choice("hypergrid", "risky_hypergrid", "seqgen", "two_arm"), None, "environment family"),
    "env.H": Key(_int(2, 10_000), None, "grid side length"),
    "env.D": Key(_int(1, 64), None, "grid dimension"),
    "env.R0": Key(_float(0.0, lo_open=True), None, "floor reward (default 1e-3, or 0.1 on the risky grid)"),
    "env.R1": Key(_float(0.0), 0.5, "outer-band reward"),
    "env.R2": Key(_float(0.0), 2.0, "inner-band reward"),
    "env.risky.p": Key(_float(0.0, 1.0), 0.3, "trigger probability of the low reward"),
    "env.risky.low": Key(_float(0.0, lo_open=True), 0.1, "low reward"),
    "env.risky.mode_reward": Key(_float(0.0, lo_open=True), 2.6, "risky-block reward on mode cells"),
    "env.risky.outer_reward": Key(_float(0.0, lo_open=True), 0.6, "risky-block reward off mode cells"),
    "env.length": Key(_int(1, 4096), None, "sequence length"),
    "env.targets": Key(_targets, "blocks", "'blocks' or explicit binary strings"),
    "env.n_targets": Key(_int(1, 10_000), 4, "number of block targets"),
    "env.target_seed": Key(_int(0), 0, "seed of the block-target draw"),
    "run.algo": Key(_choice("fm", "tb", "qm"), None, "training objective"),
    "run.seed": Key(_int(0), 0, "seed of a single run"),
    "run.seeds": Key(_int_list, (0, 1, 2, 3), "seed list of a sweep"),
    "model.hidden": Key(_int(1, 65_536), 256, "hidden width"),
    "qm.N": Key(_int(1, 4096), 8, "levels beta per step"),
    "qm.Ntilde": Key(_int(1, 4096), 8, "levels beta-tilde per step"),
    "qm.head": Key(_choice("implicit", "explicit"), "implicit", "quantile head"),
    "qm.M": Key(_int(1, 100_000), 200, "explicit-head grid size"),
    "qm.fourier_dim": Key(_int(1, 65_536), None, "Fourier feature size (equals model.hidden)"),
    "qm.pinball": Key(_choice("huber", "l1"), "huber", "pinball base loss"),
    "qm.huber_kappa": Key(_float(0.0, lo_open=True), 1.0, "Huber threshold"),
    "qm.shared_levels": Key(_bool, True, "one level draw for the whole batch instead of one per state"),
    "qm.target_grad": Key(_bool, True, "differentiate through the out-flow side of delta"),
    "tb.backward": Key(_choice("learned", "uniform"), "learned", "backward policy"),
    "risk.measure": Key(_choice("identity", "cpw", "wang", "cvar"), "identity", "distortion family"),
    "risk.eta": Key(_float(), 0.0, "distortion parameter"),
    "eval.N": Key(_int(1, 4096), None, "levels per policy evaluation (default qm.N)"),
    "eval.exact": Key(_bool, True, "DP-extract the policy's terminating distribution"),
    "explore.epsilon": Key(_float(0.0, 1.0), None, "uniform-action probability"),
    "train.steps": Key(_int(0), 1000, "gradient steps"),
    "train.batch_size": Key(_int(1), 16, "trajectories per step"),
    "train.lr": Key(_float(0.0, lo_open=True), None, "Adam learning rate"),
    "train.eval_every": Key(_int(1), 100, "steps between evaluations"),
    "train.window": Key(_int(1), None, "terminal window of the empirical l1"),
    "train.violation_window": Key(_int(1), 2000, "sample window of the violation rate"),
}

REQUIRED = ("env.type", "run.algo")
REQUIRED_BY_ENV = {"hypergrid": ("env.H", "env.D"), "risky_hypergrid": ("env.H", "env.D"),
                   "seqgen": ("env.length",), "two_arm": ()}


@dataclass
class RunConfig:
    values: dict
    source: str = "<config>"
    text: str = ""
    lines: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise KeyError(key)
        v = self.values.get(key)
        return SCHEMA[key].default if v is None else v

    def is_set(self, key: str) -> bool:
        return self.values.get(key) is not None

    def error(self, key: str, message: str) -> ConfigError:
        return ConfigError(key, message, self.source, self.lines.get(key))


def _locate_lines(text: str) -> dict:
    """Dotted key -> 1-based line number, scanning the raw text."""
    out, section = {}, None
    for i, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        m = re.match(r"\[([^\]]+)\]", line)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"([^=:]+?)\s*[=:]", line)
        if m and section is not None:
            out.setdefault(f"{section}.{m.group(1).strip()}", i)
    return out


def parse_config(text: str, source: str = "<config>", overrides: dict | None = None) -> RunConfig:
    """Parse and validate config text; ``overrides`` maps dotted keys to raw strings."""
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"),
                                       empty_lines_in_values=False)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        raise ConfigError("<syntax>", str(exc).splitlines()[0], source, line) from None
    lines = _locate_lines(text)
    raw = {}
    for section in parser.sections():
        for key, value in parser.items(section):
            raw[f"{section}.{key}"] = value
    for key, value in (overrides or {}).items():
        raw[key] = value
        lines.pop(key, None)
    cfg = RunConfig({}, source, text, lines)
    for key, value in raw.items():
        if key not in SCHEMA:
            raise cfg.error(key, "unknown key")
        try:
            cfg.values[key] = SCHEMA[key].parse(value.strip())
        except ValueError as exc:
            raise cfg.error(key, str(exc)) from None
    _cross_check(cfg)
    return cfg


def _cross_check(cfg: RunConfig) -> None:
    for key in REQUIRED:
        if not cfg.is_set(key):
            raise cfg.error(key, "missing required key")
    env_type = cfg["env.type"]
    for key in REQUIRED_BY_ENV[env_type]:
        if not cfg.is_set(key):
            raise cfg.error(key, f"missing required key for env.type={env_type}")
    try:
        DistortionMeasure(cfg["risk.measure"], cfg["risk.eta"])
    except ValueError as exc:
        raise cfg.error("risk.eta", str(exc)) from None
    if cfg.is_set("qm.fourier_dim") and cfg.is_set("model.hidden") and cfg["qm.fourier_dim"] != cfg["model.hidden"]:
        raise cfg.error("qm.fourier_dim", "must equal model.hidden (features merge elementwise)")
    if env_type == "seqgen" and cfg["env.targets"] != "blocks":
        for t in cfg["env.targets"]:
            if len(t) != cfg["env.length"]:
                raise cfg.error("env.targets", f"target {t} does not have length {cfg['env.length']}")
    if env_type in ("hypergrid", "risky_hypergrid") and cfg["env.H"] ** cfg["env.D"] > 10**9:
        raise cfg.error("env.D", "grid has more than 1e9 cells")
    if env_type == "risky_hypergrid" and cfg["env.D"] < 2:
        raise cfg.error("env.D", "the risky grid needs D >= 2")


# -- presets ---------------------------------------------------------------------------

PRESETS = ("hypergrid-8x8", "hypergrid-8x8x8", "hypergrid-16x16x16", "hypergrid-20^4", "risky-small",
           "risky-large", "sparse-R0-sweep", "seqgen-desk", "seqgen-120")


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise KeyError(name)
    return resources.files("qflow").joinpath("presets", f"{name}.ini").read_text()


def load_config(spec: str, overrides: dict | None = None) -> RunConfig:
    """``spec`` is a preset name or a path to a config file."""
    if spec in PRESETS:
        return parse_config(preset_text(spec), f"preset:{spec}", overrides)
    try:
        with open(spec) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read config: {exc.strerror}", spec) from None
    return parse_config(text, spec, overrides)


# -- builders ----------------------------------------------------------------------------

def build_env(cfg: RunConfig) -> Env:
    kind = cfg["env.type"]
    if kind == "two_arm":
        return two_arm_env()
    if kind == "seqgen":
        targets = cfg["env.targets"]
        if targets == "blocks":
            rng = np.random.default_rng(cfg["env.target_seed"])
            try:
                targets = build_targets(cfg["env.length"], cfg["env.n_targets"], rng)
            except ValueError as exc:
                raise cfg.error("env.n_targets", str(exc)) from None
            log.info("seqgen targets (seed %d): %s", cfg["env.target_seed"], ", ".join(targets))
        return SeqEnv(SeqConfig(cfg["env.length"], tuple(targets)))
    r0 = cfg["env.R0"] if cfg.is_set("env.R0") else (0.1 if kind == "risky_hypergrid" else 1e-3)
    base = HypergridConfig(cfg["env.H"], cfg["env.D"], r0, cfg["env.R1"], cfg["env.R2"])
    if kind == "hypergrid":
        return Hypergrid(base)
    return RiskyHypergrid(RiskyConfig(base, None, cfg["env.risky.p"], cfg["env.risky.low"],
                                      cfg["env.risky.mode_reward"], cfg["env.risky.outer_reward"]))


def build_agent(cfg: RunConfig, env: Env, rng: np.random.Generator) -> Agent:
    hidden = cfg["model.hidden"]
    if cfg.is_set("qm.fourier_dim") and not cfg.is_set("model.hidden"):
        hidden = cfg["qm.fourier_dim"]
    algo = cfg["run.algo"]
    if algo == "fm":
        return FMAgent(env, rng, hidden=hidden)
    if algo == "tb":
        return TBAgent(env, rng, hidden=hidden, backward=cfg["tb.backward"])
    return QMAgent(env, rng, hidden=hidden, n=cfg["qm.N"], n_tilde=cfg["qm.Ntilde"], eval_n=cfg["eval.N"],
                   head=cfg["qm.head"], n_quantiles=cfg["qm.M"], pinball=cfg["qm.pinball"],
                   kappa=cfg["qm.huber_kappa"], distortion=DistortionMeasure(cfg["risk.measure"], cfg["risk.eta"]),
                   shared_levels=cfg["qm.shared_levels"], target_grad=cfg["qm.target_grad"])


def build_train_config(cfg: RunConfig, seed: int) -> TrainConfig:
    seqgen = cfg["env.type"] == "seqgen"
    lr = cfg["train.lr"] if cfg.is_set("train.lr") else (5e-4 if seqgen else 1e-4)
    eps = cfg["explore.epsilon"] if cfg.is_set("explore.epsilon") else (0.005 if seqgen else 0.0)
    return TrainConfig(steps=cfg["train.steps"], batch_size=cfg["train.batch_size"], lr=lr, epsilon=eps,
                       eval_every=cfg["train.eval_every"], window=cfg["train.window"],
                       violation_window=cfg["train.violation_window"], seed=seed, exact_eval=cfg["eval.exact"])
