"""Training loop, trajectory sampling, metrics and checkpoints."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import struct
import tempfile
from collections import Counter, deque
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .env import (Env, EnumerationError, Trajectory, exact_terminating_probabilities, from_jsonable,
                  l1_distance, target_distribution, to_jsonable)
from .losses import (LOG_CLAMP, EdgeFlowModel, FlowBatch, QuantileFlowModel, TBModel, fm_losses,
                     crossing_rate, policy_from_edge_flows, qm_losses, qm_policy, tb_losses, tb_policy)
from .nn import AdamState, adam_step
from .quantile import IDENTITY, DistortionMeasure

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "states_visited", "loss", "l1_error", "l1_exact", "modes_found",
                  "violation_rate", "top10_reward", "top100_reward")


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def make_rngs(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    """(init, train) generators; Philox is counter based and portable."""
    init_ss, train_ss = np.random.SeedSequence(seed).spawn(2)
    return np.random.Generator(np.random.Philox(init_ss)), np.random.Generator(np.random.Philox(train_ss))


# -- sampling ------------------------------------------------------------------

def sample_trajectories(env: Env, policy: Callable, n: int, epsilon: float,
                        rng: np.random.Generator) -> list[Trajectory]:
    """Roll out ``n`` trajectories in lockstep.

    At every step a state takes a uniformly random valid action with
    probability ``epsilon`` and otherwise samples from ``policy``.  The
    recorded log P_F is that of the unmixed policy.
    """
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    s0 = env.initial_state
    trajs = [Trajectory([s0], []) for _ in range(n)]
    active = list(range(n))
    while active:
        states = [trajs[i].states[-1] for i in active]
        probs = np.asarray(policy(states))
        mask = env.action_mask(states)
        counts = mask.sum(axis=1)
        assert np.all(counts > 0), "dead-end state"
        explore = rng.uniform(size=len(active)) < epsilon
        u = rng.uniform(size=len(active))
        still = []
        for k, i in enumerate(active):
            if explore[k]:
                valid = np.flatnonzero(mask[k])
                a = int(valid[min(int(u[k] * counts[k]), counts[k] - 1)])
            else:
                cdf = np.cumsum(probs[k])
                a = int(min(np.searchsorted(cdf, u[k] * cdf[-1], side="right"), env.n_actions - 1))
                while not mask[k, a]:
                    a -= 1
            tau = trajs[i]
            p = probs[k, a]
            tau.log_pf.append(math.log(p) if p > 0 else LOG_CLAMP)
            tau.actions.append(a)
            nxt = env.step(tau.states[-1], a)
            tau.states.append(nxt)
            if env.is_terminal(nxt):
                tau.reward = env.reward(nxt, rng)
            else:
                still.append(i)
        active = still
    return trajs


def sample_trajectory(env: Env, policy: Callable, epsilon: float, rng: np.random.Generator) -> Trajectory:
    return sample_trajectories(env, policy, 1, epsilon, rng)[0]


# -- agents ----------------------------------------------------------------------

class Agent:
    """Couples a model with its loss and its policies."""

    name = ""
    model = None

    @property
    def params(self) -> dict:
        return self.model.params

    def sample_policy(self, states, rng):
        raise NotImplementedError

    def exact_policy(self, states):
        raise NotImplementedError

    def loss(self, trajectories: Sequence[Trajectory], rng) -> ad.Tensor:
        raise NotImplementedError


def _flow_targets(trajectories):
    targets, log_r = [], []
    for tau in trajectories:
        for s in tau.states[1:]:
            targets.append(s)
            log_r.append(math.log(tau.reward) if s == tau.terminal else 0.0)
    return targets, np.asarray(log_r)


class FMAgent(Agent):
    name = "fm"

    def __init__(self, env: Env, rng, hidden: int = 256):
        self.env = env
        self.model = EdgeFlowModel(env.encoding_dim, env.n_actions, rng, hidden=hidden)

    def sample_policy(self, states, rng):
        return policy_from_edge_flows(self.model, self.env, states)

    def exact_policy(self, states):
        return policy_from_edge_flows(self.model, self.env, states)

    def loss(self, trajectories, rng):
        targets, log_r = _flow_targets(trajectories)
        batch = FlowBatch.build(self.env, targets)
        return fm_losses(self.model, batch, log_r).sum() * (1.0 / len(trajectories))


class QMAgent(Agent):
    name = "qm"

    def __init__(self, env: Env, rng, hidden: int = 256, n: int = 8, n_tilde: int = 8, eval_n: int | None = None,
                 head: str = "implicit", n_quantiles: int = 200, pinball: str = "huber", kappa: float = 1.0,
                 distortion: DistortionMeasure = IDENTITY, exact_levels: int = 32, shared_levels: bool = True,
                 target_grad: bool = True):
        self.env = env
        self.model = QuantileFlowModel(env.encoding_dim, env.n_actions, rng, hidden=hidden, head=head,
                                       n_quantiles=n_quantiles)
        self.n, self.n_tilde = n, n_tilde
        self.eval_n = n if eval_n is None else eval_n
        self.pinball, self.kappa = pinball, kappa
        self.distortion = distortion
        self.exact_levels = exact_levels
        self.shared_levels = shared_levels
        self.target_grad = target_grad

    def sample_policy(self, states, rng):
        return qm_policy(self.model, self.env, states, self.eval_n, self.distortion, rng)

    def exact_policy(self, states):
        # midpoint-grid limit of the sampled-level estimate
        return qm_policy(self.model, self.env, states, self.exact_levels, self.distortion)

    def loss(self, trajectories, rng):
        targets, log_r = _flow_targets(trajectories)
        batch = FlowBatch.build(self.env, targets)
        # one level draw serves the whole batch unless per-state levels are requested;
        # out-flows act as fixed regression targets unless target_grad is set
        shape = () if self.shared_levels else (len(targets),)
        betas = rng.uniform(size=shape + (self.n,))
        betas_tilde = rng.uniform(size=shape + (self.n_tilde,))
        losses = qm_losses(self.model, batch, betas, betas_tilde, log_r, self.pinball, self.kappa,
                           self.target_grad)
        return losses.sum() * (1.0 / len(trajectories))


class TBAgent(Agent):
    name = "tb"

    def __init__(self, env: Env, rng, hidden: int = 256, backward: str = "learned"):
        self.env = env
        self.model = TBModel(env.encoding_dim, env.n_actions, rng, hidden=hidden)
        self.backward = backward

    def sample_policy(self, states, rng):
        return tb_policy(self.model, self.env, states)

    def exact_policy(self, states):
        return tb_policy(self.model, self.env, states)

    def loss(self, trajectories, rng):
        return tb_losses(self.model, self.env, trajectories, backward=self.backward).mean()


# -- metrics -----------------------------------------------------------------------

@dataclass
class MetricsRecord:
    step: int
    states_visited: int
    loss: float
    l1_error: float | None = None
    l1_exact: float | None = None
    modes_found: int = 0
    violation_rate: float | None = None
    top10_reward: float | None = None
    top100_reward: float | None = None

    def row(self) -> list[str]:
        out = []
        for name in METRIC_COLUMNS:
            v = getattr(self, name)
            out.append("" if v is None else (repr(float(v)) if isinstance(v, float) else str(v)))
        return out


class VisitBuffer:
    """FIFO windows over recent terminals and recent risky flags."""

    def __init__(self, capacity: int = 200_000, risky_capacity: int = 2_000):
        if capacity < 1 or risky_capacity < 1:
            raise ValueError("buffer capacities must be positive")
        self.terminals: deque = deque(maxlen=capacity)
        self.risky: deque = deque(maxlen=risky_capacity)
        self.counts: Counter = Counter()

    def push(self, x, risky: bool = False) -> None:
        if len(self.terminals) == self.terminals.maxlen:
            old = self.terminals[0]
            self.counts[old] -= 1
            if self.counts[old] == 0:
                del self.counts[old]
        self.terminals.append(x)
        self.counts[x] += 1
        self.risky.append(bool(risky))

    def __len__(self) -> int:
        return len(self.terminals)

    def empirical(self) -> dict:
        n = len(self.terminals)
        return {x: c / n for x, c in self.counts.items()}

    def violation_rate(self) -> float | None:
        return sum(self.risky) / len(self.risky) if self.risky else None


def evaluate_metrics(buffer: VisitBuffer, env: Env, target: dict | None = None,
                     exact: dict | None = None, modes: set | None = None,
                     best: dict | None = None) -> dict:
    """Metric fields from the visit buffer and optional exact distributions.

    ``target`` is the reference distribution over terminals, ``exact`` the
    DP terminating distribution of the current policy, ``best`` maps each
    distinct terminal seen to its (expected) reward.
    """
    out: dict = {}
    if target is not None and len(buffer):
        out["l1_error"] = l1_distance(buffer.empirical(), target)
    if target is not None and exact is not None:
        out["l1_exact"] = l1_distance(exact, target)
    out["modes_found"] = len(modes) if modes is not None else 0
    out["violation_rate"] = buffer.violation_rate()
    if best:
        ranked = sorted(best.values(), reverse=True)
        out["top10_reward"] = float(np.mean(ranked[:10]))
        out["top100_reward"] = float(np.mean(ranked[:100]))
    return out


def write_metrics_csv(records: Sequence[MetricsRecord], path: str) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in records:
        w.writerow(r.row())
    atomic_write(path, buf.getvalue().encode())


def read_metrics_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def atomic_write(path: str, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- training loop -----------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-4
    epsilon: float = 0.0
    eval_every: int = 100
    window: int | None = None
    violation_window: int = 2000
    seed: int = 0
    exact_eval: bool = True

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("steps, batch_size and eval_every must be positive")
        if not 0 <= self.epsilon <= 1:
            raise ValueError("epsilon must lie in [0, 1]")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")


class Trainer:
    """Sample a batch, sum per-state (or per-trajectory) losses, take one Adam step."""

    def __init__(self, env: Env, agent: Agent, cfg: TrainConfig, train_rng: np.random.Generator | None = None):
        self.env, self.agent, self.cfg = env, agent, cfg
        self.rng = train_rng if train_rng is not None else make_rngs(cfg.seed)[1]
        self.adam = AdamState(lr=cfg.lr)
        count = env.state_count()
        window = cfg.window
        if window is None:
            window = 200_000 if count is None else min(200_000, 50 * count)
        self.buffer = VisitBuffer(window, cfg.violation_window)
        self.step = 0
        self.states_visited = 0
        self.modes: set = set()
        self.best: dict = {}
        self.loss_sum = 0.0
        self.loss_count = 0
        self.records: list[MetricsRecord] = []
        self._target = None
        self._enumerable = None

    # evaluation helpers
    def target(self) -> dict | None:
        if self._enumerable is None:
            try:
                count = self.env.state_count()
                self._enumerable = count is None or count <= 200_000
                if self._enumerable:
                    self._target = None if self.env.stochastic else target_distribution(self.env)
            except EnumerationError:
                self._enumerable = False
        return self._target

    def exact_distribution(self) -> dict:
        return exact_terminating_probabilities(self.env, self.agent.exact_policy)

    def train_step(self) -> float:
        trajs = sample_trajectories(self.env, lambda s: self.agent.sample_policy(s, self.rng),
                                    self.cfg.batch_size, self.cfg.epsilon, self.rng)
        loss = self.agent.loss(trajs, self.rng)
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingError(f"non-finite loss {value} at step {self.step}; terminals "
                                f"{[self.env.key(t.terminal) for t in trajs]}")
        params = self.agent.params
        grads = ad.grad_backward(loss, params.values())
        adam_step(params, {k: grads[id(p)] for k, p in params.items()}, self.adam)
        for tau in trajs:
            x = tau.terminal
            self.buffer.push(x, self.env.is_risky(x))
            self.states_visited += len(tau)
            mode = self.env.mode_of(x)
            if mode is not None:
                self.modes.add(mode)
            if x not in self.best:
                self.best[x] = self.env.expected_reward(x)
        self.step += 1
        self.loss_sum += value
        self.loss_count += 1
        return value

    def evaluate(self) -> MetricsRecord:
        target = self.target()
        exact = None
        if self.cfg.exact_eval and target is not None:
            exact = self.exact_distribution()
        fields_ = evaluate_metrics(self.buffer, self.env, target, exact, self.modes, self.best)
        loss = self.loss_sum / self.loss_count if self.loss_count else float("nan")
        self.loss_sum, self.loss_count = 0.0, 0
        if isinstance(self.agent, QMAgent) and self.buffer.terminals and log.isEnabledFor(logging.INFO):
            # quantile crossings are reported, not corrected
            recent = list(dict.fromkeys(self._parents_of_recent()))
            log.info("step %d quantile crossing rate %.4f", self.step,
                     crossing_rate(self.agent.model, self.env, recent))
        return MetricsRecord(step=self.step, states_visited=self.states_visited, loss=loss, **fields_)

    def _parents_of_recent(self, limit: int = 256):
        out = []
        for x in list(self.buffer.terminals)[-limit:]:
            out.extend(p for p, _ in self.env.parents(x))
        return out

    def run(self, steps: int | None = None, on_record: Callable | None = None) -> list[MetricsRecord]:
        end = self.cfg.steps if steps is None else self.step + steps
        while self.step < end:
            self.train_step()
            if self.step % self.cfg.eval_every == 0 or self.step == end:
                rec = self.evaluate()
                self.records.append(rec)
                if on_record is not None:
                    on_record(rec)
        return self.records

    # -- checkpoints ------------------------------------------------------------
    def save(self, path: str, meta: dict | None = None) -> None:
        blocks = []
        for name, p in self.agent.params.items():
            blocks.append(("param/" + name, p.data))
        for name in sorted(self.adam.m):
            blocks.append(("adam_m/" + name, self.adam.m[name]))
            blocks.append(("adam_v/" + name, self.adam.v[name]))
        manifest, raw, offset = [], [], 0
        for name, arr in blocks:
            data = np.ascontiguousarray(arr, dtype="<f8").tobytes()
            manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
            raw.append(data)
            offset += len(data)
        state = {
            "rng": _jsonable_rng(self.rng.bit_generator.state),
            "adam": {"lr": self.adam.lr, "beta1": self.adam.beta1, "beta2": self.adam.beta2,
                     "eps": self.adam.eps, "step": self.adam.step},
            "trainer": {"step": self.step, "states_visited": self.states_visited,
                        "loss_sum": self.loss_sum, "loss_count": self.loss_count},
            "buffer": {"capacity": self.buffer.terminals.maxlen, "risky_capacity": self.buffer.risky.maxlen,
                       "terminals": [to_jsonable(x) for x in self.buffer.terminals],
                       "risky": list(self.buffer.risky)},
            "modes": sorted(to_jsonable(m) for m in self.modes),
            "best": [[to_jsonable(x), r] for x, r in self.best.items()],
            "records": [asdict(r) for r in self.records],
            "meta": meta or {},
        }
        write_checkpoint(path, manifest, b"".join(raw), state)

    def load(self, path: str) -> dict:
        """Restore everything saved by :meth:`save`; returns the stored meta."""
        manifest, raw, state = read_checkpoint(path)
        params = self.agent.params
        arrays = {}
        for entry in manifest:
            n = int(np.prod(entry["shape"])) * 8
            chunk = raw[entry["offset"]: entry["offset"] + n]
            if len(chunk) != n:
                raise CheckpointError(f"block {entry['name']} is truncated")
            arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
        wanted = {"param/" + k for k in params}
        present = {k for k in arrays if k.startswith("param/")}
        if wanted != present:
            raise CheckpointError(f"parameter manifest mismatch: {sorted(wanted ^ present)}")
        for k, p in params.items():
            if arrays["param/" + k].shape != p.shape:
                raise CheckpointError(f"shape mismatch for {k}")
        # everything validated; now mutate
        for k, p in params.items():
            p.data = arrays["param/" + k]
        a = state["adam"]
        self.adam = AdamState(lr=a["lr"], beta1=a["beta1"], beta2=a["beta2"], eps=a["eps"], step=a["step"])
        for name in list(arrays):
            if name.startswith("adam_m/"):
                self.adam.m[name[7:]] = arrays[name]
            elif name.startswith("adam_v/"):
                self.adam.v[name[7:]] = arrays[name]
        self.rng.bit_generator.state = _restore_rng(state["rng"])
        t = state["trainer"]
        self.step, self.states_visited = t["step"], t["states_visited"]
        self.loss_sum, self.loss_count = t["loss_sum"], t["loss_count"]
        b = state["buffer"]
        self.buffer = VisitBuffer(b["capacity"], b["risky_capacity"])
        for x in b["terminals"]:
            self.buffer.push(from_jsonable(x))
        self.buffer.risky = deque(b["risky"], maxlen=b["risky_capacity"])
        self.modes = {from_jsonable(m) for m in state["modes"]}
        self.best = {from_jsonable(x): r for x, r in state["best"]}
        self.records = [MetricsRecord(**r) for r in state["records"]]
        return state["meta"]


MAGIC = b"QFLOWCKP"
FORMAT_VERSION = 1


def _jsonable_rng(state: dict):
    if isinstance(state, dict):
        return {k: _jsonable_rng(v) for k, v in state.items()}
    if isinstance(state, np.ndarray):
        return {"__array__": [int(v) for v in state], "dtype": str(state.dtype)}
    if isinstance(state, np.integer):
        return int(state)
    return state


def _restore_rng(state):
    if isinstance(state, dict):
        if "__array__" in state:
            return np.array(state["__array__"], dtype=state["dtype"])
        return {k: _restore_rng(v) for k, v in state.items()}
    return state


def write_checkpoint(path: str, manifest: list, raw: bytes, state: dict) -> None:
    """magic | version | manifest | float blocks | state | sha256 of all preceding bytes."""
    head = json.dumps({"blocks": manifest, "rng_algorithm": "Philox4x64-10"}).encode()
    tail = json.dumps(state, allow_nan=True).encode()
    body = b"".join([MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<Q", len(head)), head,
                     struct.pack("<Q", len(raw)), raw, struct.pack("<Q", len(tail)), tail])
    atomic_write(path, body + hashlib.sha256(body).digest())


def read_checkpoint(path: str) -> tuple[list, bytes, dict]:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 4 + 32 or data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint")
    body, digest = data[:-32], data[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path} failed its checksum (corrupted or truncated)")
    pos = len(MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos += 4
    try:
        (n,) = struct.unpack_from("<Q", body, pos)
        head = json.loads(body[pos + 8: pos + 8 + n])
        pos += 8 + n
        (n,) = struct.unpack_from("<Q", body, pos)
        raw = body[pos + 8: pos + 8 + n]
        pos += 8 + n
        (n,) = struct.unpack_from("<Q", body, pos)
        state = json.loads(body[pos + 8: pos + 8 + n])
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    return head["blocks"], raw, state
