"""Command-line entry point.

    qflow train --config risky-small --seed 0 --out runs/a
    qflow eval --checkpoint runs/a/checkpoint.bin
    qflow oracle dp --config hypergrid-8x8 --out runs/oracle
    qflow sweep --config hypergrid-8x8 --out runs/sweep --parallel 2
    qflow plot-data runs/sweep/seed-*/metrics.csv --metric l1_exact --out curves.csv

Exit status: 0 on success, 2 on configuration or usage errors, 1 on
runtime failures.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from .config import (PRESETS, SCHEMA, ConfigError, RunConfig, build_agent, build_env, build_train_config,
                     load_config, parse_config)
from .env import exact_terminating_probabilities, geometric_mean_target, target_distribution, uniform_policy
from .trainer import (METRIC_COLUMNS, CheckpointError, Trainer, atomic_write, make_rngs, read_metrics_csv,
                      read_checkpoint, write_metrics_csv)

log = logging.getLogger("qflow")

METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "checkpoint.bin"
RUN_FILE = "run.json"


class UsageError(Exception):
    pass


def _overrides(pairs) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise ConfigError(item, "--set expects key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def resolve_seed(cfg: RunConfig, flag: int | None) -> int:
    """--seed beats QFLOW_SEED, which beats run.seed."""
    if flag is not None:
        return flag
    env_seed = os.environ.get("QFLOW_SEED")
    if env_seed is not None:
        try:
            seed = int(env_seed)
        except ValueError:
            raise ConfigError("QFLOW_SEED", f"expected an integer, got {env_seed!r}") from None
        if seed < 0:
            raise ConfigError("QFLOW_SEED", "must be >= 0")
        return seed
    return cfg["run.seed"]


def run_training(cfg: RunConfig, seed: int, out: str, log_every: bool = False) -> list:
    """Train one seed; writes metrics.csv, checkpoint.bin and run.json under ``out``."""
    env = build_env(cfg)
    init_rng, train_rng = make_rngs(seed)
    agent = build_agent(cfg, env, init_rng)
    trainer = Trainer(env, agent, build_train_config(cfg, seed), train_rng)
    os.makedirs(out, exist_ok=True)

    def on_record(rec):
        write_metrics_csv(trainer.records, os.path.join(out, METRICS_FILE))
        if log_every:
            log.info("step %d  visited %d  loss %.4g  l1_exact %s  modes %d", rec.step, rec.states_visited,
                     rec.loss, "-" if rec.l1_exact is None else f"{rec.l1_exact:.4f}", rec.modes_found)

    records = trainer.run(on_record=on_record)
    write_metrics_csv(records, os.path.join(out, METRICS_FILE))
    meta = {"config": cfg.text, "overrides": _set_values(cfg), "source": cfg.source, "seed": seed}
    trainer.save(os.path.join(out, CHECKPOINT_FILE), meta)
    run_info = {"series": _series_label(cfg), "seed": seed, "source": cfg.source}
    atomic_write(os.path.join(out, RUN_FILE), json.dumps(run_info, indent=1).encode())
    return records


def _set_values(cfg: RunConfig) -> dict:
    # values that did not come from the text (command-line overrides)
    return {k: str(v) if not isinstance(v, tuple) else ",".join(map(str, v))
            for k, v in cfg.values.items() if k not in cfg.lines and v is not None}


def _series_label(cfg: RunConfig) -> str:
    label = cfg.source.split(":", 1)[-1]
    label = os.path.splitext(os.path.basename(label))[0]
    parts = [label, cfg["run.algo"]]
    if cfg["run.algo"] == "qm" and cfg["risk.measure"] != "identity":
        parts.append(f"{cfg['risk.measure']}({cfg['risk.eta']:g})")
    return "/".join(parts)


# -- subcommands ----------------------------------------------------------------------

def cmd_train(args) -> int:
    cfg = load_config(args.config, _overrides(args.set))
    seed = resolve_seed(cfg, args.seed)
    records = run_training(cfg, seed, args.out, log_every=True)
    last = records[-1] if records else None
    print(f"trained {cfg['run.algo']} seed {seed}: {len(records)} evaluations -> {args.out}")
    if last is not None and last.l1_exact is not None:
        print(f"final l1_exact {last.l1_exact:.4f}")
    return 0


def cmd_eval(args) -> int:
    try:
        _, _, state = read_checkpoint(args.checkpoint)
        meta = state["meta"]
        cfg = parse_config(meta["config"], meta.get("source", args.checkpoint), meta.get("overrides") or {})
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"checkpoint has no usable config: {exc}") from None
    env = build_env(cfg)
    init_rng, train_rng = make_rngs(meta.get("seed", 0))
    trainer = Trainer(env, build_agent(cfg, env, init_rng), build_train_config(cfg, meta.get("seed", 0)), train_rng)
    trainer.load(args.checkpoint)
    rec = trainer.evaluate()
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    w.writerow(rec.row())
    if args.out:
        atomic_write(args.out, buf.getvalue().encode())
    sys.stdout.write(buf.getvalue())
    return 0


def cmd_oracle(args) -> int:
    cfg = load_config(args.config, _overrides(args.set))
    env = build_env(cfg)
    if env.state_count() is None or env.state_count() > 2_000_000:
        raise UsageError("environment is too large for the DP oracle")
    dp = exact_terminating_probabilities(env, uniform_policy(env))
    target = geometric_mean_target(env) if env.stochastic else target_distribution(env)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["terminal", "p_uniform", "p_target"])
    for x in env.terminal_states():
        w.writerow([env.key(x), repr(float(dp.get(x, 0.0))), repr(float(target.get(x, 0.0)))])
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "dp.csv")
    atomic_write(path, buf.getvalue().encode())
    print(f"wrote {len(env.terminal_states())} terminals -> {path}")
    return 0


def _sweep_worker(job):
    text, source, overrides, seed, out = job
    cfg = parse_config(text, source, overrides)
    run_training(cfg, seed, out)
    return seed


def cmd_sweep(args) -> int:
    overrides = _overrides(args.set)
    cfg = load_config(args.config, overrides)
    seeds = cfg["run.seeds"]
    if args.seeds:
        seeds = SCHEMA["run.seeds"].parse(args.seeds)
    if args.parallel < 1:
        raise UsageError("--parallel must be >= 1")
    jobs = [(cfg.text, cfg.source, overrides, s, os.path.join(args.out, f"seed-{s}")) for s in seeds]
    if args.parallel == 1:
        for job in jobs:
            _sweep_worker(job)
            log.info("seed %d done", job[3])
    else:
        with ProcessPoolExecutor(max_workers=args.parallel) as pool:
            for seed in pool.map(_sweep_worker, jobs):
                log.info("seed %d done", seed)
    paths = [os.path.join(j[4], METRICS_FILE) for j in jobs]
    aggregate = aggregate_metrics(paths)
    atomic_write(os.path.join(args.out, "aggregate.csv"), aggregate.encode())
    print(f"swept seeds {list(seeds)} -> {args.out}")
    return 0


def aggregate_metrics(paths) -> str:
    """Mean and std per metric column across runs, one row per evaluation point."""
    runs = [read_metrics_csv(p) for p in paths]
    if not runs:
        raise UsageError("no metrics files to aggregate")
    n = min(len(r) for r in runs)
    value_cols = [c for c in METRIC_COLUMNS if c != "step"]
    header = ["step"] + [f"{c}_{s}" for c in value_cols for s in ("mean", "std")]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for i in range(n):
        steps = {r[i]["step"] for r in runs}
        if len(steps) != 1:
            raise UsageError(f"runs disagree on evaluation step at row {i}: {sorted(steps)}")
        row = [steps.pop()]
        for c in value_cols:
            vals = [float(r[i][c]) for r in runs if r[i][c] != ""]
            if vals:
                row += [repr(float(np.mean(vals))), repr(float(np.std(vals)))]
            else:
                row += ["", ""]
        w.writerow(row)
    return buf.getvalue()


def cmd_plot_data(args) -> int:
    if not args.metrics:
        raise UsageError("plot-data needs at least one metrics file")
    if args.metric not in METRIC_COLUMNS or args.metric == "step":
        raise UsageError(f"unknown metric {args.metric!r}")
    rows = []
    header = None
    for k, path in enumerate(args.metrics):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if header is None:
                header = reader.fieldnames
            elif reader.fieldnames != header:
                raise UsageError(f"{path} has columns {reader.fieldnames}, expected {header}")
            data = list(reader)
        label, seed = _run_identity(path, k)
        for r in data:
            if r[args.metric] == "":
                continue
            rows.append([f"{label}:{args.metric}", seed, r[args.x], r[args.metric]])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["series", "seed", "x", "y"])
    w.writerows(rows)
    atomic_write(args.out, buf.getvalue().encode())
    print(f"wrote {len(rows)} points -> {args.out}")
    return 0


def _run_identity(path: str, index: int) -> tuple[str, int]:
    info = os.path.join(os.path.dirname(os.path.abspath(path)), RUN_FILE)
    if os.path.exists(info):
        with open(info) as fh:
            meta = json.load(fh)
        return meta["series"], int(meta["seed"])
    return os.path.basename(os.path.dirname(os.path.abspath(path))) or "run", index


# -- argument parsing -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qflow", description="Distributional GFlowNet experiments.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    config_help = f"config file or preset ({', '.join(PRESETS)})"

    t = sub.add_parser("train", help="train one seed")
    t.add_argument("--config", required=True, help=config_help)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="recompute metrics from a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--out", help="write the metrics row to this CSV")
    e.set_defaults(func=cmd_eval)

    o = sub.add_parser("oracle", help="exact oracles")
    o.add_argument("which", choices=["dp"])
    o.add_argument("--config", required=True, help=config_help)
    o.add_argument("--out", required=True)
    o.add_argument("--set", action="append", metavar="KEY=VALUE")
    o.set_defaults(func=cmd_oracle)

    s = sub.add_parser("sweep", help="train every seed of run.seeds")
    s.add_argument("--config", required=True, help=config_help)
    s.add_argument("--out", required=True)
    s.add_argument("--seeds", help="comma-separated seeds (default run.seeds)")
    s.add_argument("--parallel", type=int, default=1, help="worker processes")
    s.add_argument("--set", action="append", metavar="KEY=VALUE")
    s.set_defaults(func=cmd_sweep)

    d = sub.add_parser("plot-data", help="merge metrics CSVs into a tidy series,seed,x,y table")
    d.add_argument("metrics", nargs="*")
    d.add_argument("--metric", default="l1_exact")
    d.add_argument("--x", choices=["states_visited", "step"], default="states_visited")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_plot_data)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"qflow: config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 1
        log.debug("failure", exc_info=True)
        print(f"qflow: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
