import csv
import os

import numpy as np
import pytest

from qflow.cli import main
from qflow.config import PRESETS, ConfigError, build_agent, build_env, load_config, parse_config

BASE = """\
[env]
type = hypergrid
H = 3
D = 2

[run]
algo = qm

[model]
hidden = 8

[train]
steps = 4
eval_every = 2
batch_size = 4
lr = 1e-3
"""


def write(tmp_path, text, name="c.ini"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


# -- config parsing -----------------------------------------------------------------

def test_parse_typed_values():
    cfg = parse_config(BASE)
    assert cfg["env.H"] == 3 and cfg["train.lr"] == 1e-3 and cfg["qm.N"] == 8
    assert cfg["run.seeds"] == (0, 1, 2, 3)


def test_missing_key_named():
    text = BASE.replace("H = 3\n", "")
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert "env.H" in str(err.value) and "missing" in str(err.value)


@pytest.mark.parametrize("line,key", [
    ("bogus = 1", "env.bogus"),
    ("H = -4", "env.H"),
    ("H = eight", "env.H"),
    ("R0 = 0", "env.R0"),
    ("type = maze", "env.type"),
])
def test_bad_values_report_key_and_line(line, key):
    text = BASE.replace("D = 2", "D = 2\n" + line) if not line.startswith(("H", "type")) else \
        BASE.replace("H = 3" if line.startswith("H") else "type = hypergrid", line)
    with pytest.raises(ConfigError) as err:
        parse_config(text, "exp.ini")
    msg = str(err.value)
    assert key in msg and msg.startswith("exp.ini:")
    lineno = [i for i, l in enumerate(text.splitlines(), 1) if l.strip() == line][0]
    assert err.value.line == lineno


def test_cross_key_checks():
    with pytest.raises(ConfigError, match="risk.eta"):
        parse_config(BASE + "[risk]\nmeasure = cvar\neta = 2\n")
    with pytest.raises(ConfigError, match="qm.fourier_dim"):
        parse_config(BASE + "[qm]\nfourier_dim = 16\n")
    with pytest.raises(ConfigError, match="env.targets"):
        parse_config("[env]\ntype = seqgen\nlength = 4\ntargets = 000\n[run]\nalgo = qm\n")


def test_syntax_error_is_config_error():
    with pytest.raises(ConfigError):
        parse_config("not a section\n")


@pytest.mark.parametrize("name", PRESETS)
def test_presets_parse(name):
    cfg = load_config(name)
    assert cfg["run.algo"] in ("fm", "tb", "qm")
    if name in ("hypergrid-8x8", "risky-small", "seqgen-desk"):
        assert build_env(cfg).state_count() > 0


def test_qm_training_keys_reach_agent():
    default = parse_config(BASE)
    agent = build_agent(default, build_env(default), np.random.default_rng(0))
    assert agent.target_grad and agent.shared_levels and agent.kappa == 1.0
    risky = load_config("risky-small")
    agent = build_agent(risky, build_env(risky), np.random.default_rng(0))
    assert not agent.target_grad and agent.kappa == 0.1 and agent.model.hidden == 128
    with pytest.raises(ConfigError, match="qm.target_grad"):
        parse_config(BASE + "[qm]\ntarget_grad = maybe\n")


# -- subcommands ---------------------------------------------------------------------

def test_train_writes_outputs(tmp_path):
    cfg = write(tmp_path, BASE)
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--seed", "1", "--out", str(out)]) == 0
    data = rows(out / "metrics.csv")
    assert data[0] == ["step", "states_visited", "loss", "l1_error", "l1_exact", "modes_found",
                       "violation_rate", "top10_reward", "top100_reward"]
    assert [r[0] for r in data[1:]] == ["2", "4"]
    assert (out / "checkpoint.bin").exists()
    assert sorted(p for p in os.listdir(out) if p.startswith(".tmp")) == []


def test_train_missing_key_exit_2(tmp_path, capsys):
    cfg = write(tmp_path, BASE.replace("H = 3\n", ""))
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "o")]) == 2
    assert "env.H" in capsys.readouterr().err
    assert not (tmp_path / "o").exists()


def test_unknown_preset_or_file_exit_2(tmp_path):
    assert main(["train", "--config", str(tmp_path / "none.ini"), "--out", str(tmp_path / "o")]) == 2
    assert main(["frobnicate"]) == 2


def test_runtime_failure_exit_1(tmp_path):
    # a corrupt checkpoint is a runtime failure, not a config error
    bad = tmp_path / "ck.bin"
    bad.write_bytes(b"garbage")
    assert main(["eval", "--checkpoint", str(bad)]) == 1


def test_seed_override_precedence(tmp_path, monkeypatch):
    cfg = write(tmp_path, BASE)
    monkeypatch.setenv("QFLOW_SEED", "3")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "a")]) == 0
    monkeypatch.delenv("QFLOW_SEED")
    assert main(["train", "--config", cfg, "--seed", "3", "--out", str(tmp_path / "b")]) == 0
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "c")]) == 0
    a, b, c = (open(tmp_path / d / "metrics.csv").read() for d in "abc")
    assert a == b and a != c
    monkeypatch.setenv("QFLOW_SEED", "x")
    assert main(["train", "--config", cfg, "--out", str(tmp_path / "d")]) == 2


def test_set_override(tmp_path):
    cfg = write(tmp_path, BASE)
    assert main(["train", "--config", cfg, "--set", "train.steps=2", "--out", str(tmp_path / "a")]) == 0
    assert [r[0] for r in rows(tmp_path / "a" / "metrics.csv")[1:]] == ["2"]
    assert main(["train", "--config", cfg, "--set", "train.nope=2", "--out", str(tmp_path / "b")]) == 2


def test_eval_recomputes_metrics(tmp_path, capsys):
    cfg = write(tmp_path, BASE)
    out = tmp_path / "run"
    assert main(["train", "--config", cfg, "--out", str(out), "--set", "train.steps=2"]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(out / "checkpoint.bin"), "--out", str(tmp_path / "e.csv")]) == 0
    trained = rows(out / "metrics.csv")[-1]
    evaluated = rows(tmp_path / "e.csv")[1]
    header = rows(out / "metrics.csv")[0]
    i = header.index("l1_exact")
    assert evaluated[i] == trained[i] and evaluated[i] != ""


def test_oracle_dp_matches_small_grid(tmp_path):
    cfg = write(tmp_path, BASE.replace("H = 3", "H = 2"))
    assert main(["oracle", "dp", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    data = {r[0]: float(r[1]) for r in rows(tmp_path / "o" / "dp.csv")[1:]}
    expect = {"[[0,0],true]": 1 / 3, "[[1,0],true]": 1 / 6, "[[0,1],true]": 1 / 6, "[[1,1],true]": 1 / 3}
    assert set(data) == set(expect)
    for k, v in expect.items():
        assert data[k] == pytest.approx(v, abs=1e-10)


def test_sweep_and_plot_data(tmp_path):
    cfg = write(tmp_path, BASE.replace("algo = qm", "algo = fm"))
    out = tmp_path / "sw"
    assert main(["sweep", "--config", cfg, "--out", str(out), "--seeds", "0,1,2,3"]) == 0
    agg = rows(out / "aggregate.csv")
    assert agg[0][:3] == ["step", "states_visited_mean", "states_visited_std"]
    assert len(agg) - 1 == 2
    files = [str(out / f"seed-{s}" / "metrics.csv") for s in range(4)]
    assert main(["plot-data", *files, "--metric", "l1_exact", "--out", str(tmp_path / "p.csv")]) == 0
    tidy = rows(tmp_path / "p.csv")
    assert tidy[0] == ["series", "seed", "x", "y"]
    assert len(tidy) - 1 == 8
    assert {r[1] for r in tidy[1:]} == {"0", "1", "2", "3"}
    assert len({r[0] for r in tidy[1:]}) == 1
    one = tmp_path / "one.csv"
    assert main(["plot-data", files[0], "--metric", "l1_error", "--x", "step", "--out", str(one)]) == 0
    assert len(rows(one)) - 1 == 2


def test_sweep_parallel_matches_sequential(tmp_path):
    cfg = write(tmp_path, BASE.replace("algo = qm", "algo = tb"))
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "s"), "--seeds", "0,1"]) == 0
    assert main(["sweep", "--config", cfg, "--out", str(tmp_path / "p"), "--seeds", "0,1", "--parallel", "2"]) == 0
    assert (tmp_path / "s" / "aggregate.csv").read_bytes() == (tmp_path / "p" / "aggregate.csv").read_bytes()


def test_plot_data_errors(tmp_path):
    out = tmp_path / "p.csv"
    assert main(["plot-data", "--out", str(out)]) == 2
    assert not out.exists()
    a = tmp_path / "a.csv"
    b = tmp_path / "b.csv"
    a.write_text("step,states_visited,loss,l1_error,l1_exact,modes_found,violation_rate,top10_reward,top100_reward\n")
    b.write_text("step,loss\n1,2\n")
    assert main(["plot-data", str(a), str(b), "--out", str(out)]) == 2
    assert not out.exists()
