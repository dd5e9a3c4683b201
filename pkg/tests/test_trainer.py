import math
import os

import numpy as np
import pytest

from qflow.env import exact_terminating_probabilities, two_arm_env, uniform_policy
from qflow.hypergrid import Hypergrid, HypergridConfig, RiskyConfig, RiskyHypergrid
from qflow.quantile import DistortionMeasure
from qflow.seqgen import SeqConfig, SeqEnv
from qflow.trainer import (CheckpointError, FMAgent, MetricsRecord, QMAgent, TBAgent, TrainConfig,
                           Trainer, VisitBuffer, evaluate_metrics, make_rngs, read_metrics_csv,
                           sample_trajectories, write_metrics_csv)


def stop_heavy_policy(env):
    def policy(states):
        mask = env.action_mask(states).astype(float)
        mask[:, -1] *= 10.0
        return mask / mask.sum(axis=1, keepdims=True)
    return policy


def make_trainer(env, algo="qm", seed=0, **cfg):
    init, train = make_rngs(seed)
    if algo == "qm":
        agent = QMAgent(env, init, hidden=16)
    elif algo == "fm":
        agent = FMAgent(env, init, hidden=16)
    else:
        agent = TBAgent(env, init, hidden=16)
    cfg.setdefault("lr", 1e-3)
    return Trainer(env, agent, TrainConfig(seed=seed, **cfg), train)


# -- sampling ------------------------------------------------------------------

def test_rngs_are_reproducible_and_independent():
    a, b = make_rngs(3)
    c, d = make_rngs(3)
    assert a.uniform() == c.uniform() and b.uniform() == d.uniform()
    a2, b2 = make_rngs(3)
    assert a2.uniform() != b2.uniform()


def test_sampling_is_deterministic():
    env = Hypergrid(HypergridConfig(H=4, D=2))
    pol = uniform_policy(env)
    t1 = sample_trajectories(env, pol, 20, 0.1, make_rngs(1)[1])
    t2 = sample_trajectories(env, pol, 20, 0.1, make_rngs(1)[1])
    assert [t.states for t in t1] == [t.states for t in t2]
    assert [t.reward for t in t1] == [t.reward for t in t2]


def test_trajectory_structure():
    env = Hypergrid(HypergridConfig(H=4, D=2))
    pol = stop_heavy_policy(env)
    for tau in sample_trajectories(env, pol, 50, 0.3, np.random.default_rng(0)):
        assert tau.states[0] == env.initial_state
        assert env.is_terminal(tau.terminal)
        assert len(tau.actions) == len(tau.states) - 1 == len(tau.log_pf)
        for s, a, nxt, lp in zip(tau.states, tau.actions, tau.states[1:], tau.log_pf):
            assert env.step(s, a) == nxt
            # recorded probability is the unmixed policy's
            assert lp == pytest.approx(math.log(pol([s])[0][a]))
        assert tau.reward == env.expected_reward(tau.terminal)


@pytest.mark.parametrize("epsilon", [0.0, 1.0])
def test_sampling_frequencies_match_dp(epsilon):
    env = Hypergrid(HypergridConfig(H=3, D=2))
    pol = stop_heavy_policy(env)
    expect = exact_terminating_probabilities(env, uniform_policy(env) if epsilon == 1.0 else pol)
    rng = np.random.default_rng(11)
    n = 100_000
    counts = {}
    for _ in range(10):
        for tau in sample_trajectories(env, pol, n // 10, epsilon, rng):
            counts[tau.terminal] = counts.get(tau.terminal, 0) + 1
    for x, p in expect.items():
        se = math.sqrt(p * (1 - p) / n)
        assert abs(counts.get(x, 0) / n - p) <= 3 * se + 1e-12


def test_sampling_rejects_bad_epsilon():
    env = Hypergrid(HypergridConfig(H=3, D=2))
    with pytest.raises(ValueError):
        sample_trajectories(env, uniform_policy(env), 1, 1.5, np.random.default_rng(0))


# -- buffer and metrics ------------------------------------------------------------

def test_visit_buffer_fifo():
    buf = VisitBuffer(capacity=3, risky_capacity=2)
    for x, r in [("a", True), ("b", False), ("c", False), ("d", True)]:
        buf.push(x, r)
    assert list(buf.terminals) == ["b", "c", "d"]
    assert buf.empirical() == {"b": 1 / 3, "c": 1 / 3, "d": 1 / 3}
    assert buf.violation_rate() == 0.5
    with pytest.raises(ValueError):
        VisitBuffer(0)


def test_metrics_examples():
    env = Hypergrid(HypergridConfig(H=3, D=2))
    xs = env.terminal_states()
    uniform = {x: 1 / len(xs) for x in xs}
    buf = VisitBuffer(100)
    for x in xs:
        buf.push(x)
    assert evaluate_metrics(buf, env, uniform)["l1_error"] == pytest.approx(0.0, abs=1e-15)
    one = VisitBuffer(100)
    for _ in range(7):
        one.push(xs[0])
    k = len(xs)
    out = evaluate_metrics(one, env, uniform)
    assert out["l1_error"] == pytest.approx(2 * (1 - 1 / k))
    assert out["violation_rate"] == 0.0
    best = {xs[i]: float(i) for i in range(k)}
    out = evaluate_metrics(one, env, uniform, best=best)
    assert out["top10_reward"] == pytest.approx(np.mean(sorted(range(k))[::-1][:10]))


def test_metrics_csv_roundtrip(tmp_path):
    recs = [MetricsRecord(1, 10, 0.5, l1_error=0.25, modes_found=2), MetricsRecord(2, 20, 0.1)]
    path = tmp_path / "m.csv"
    write_metrics_csv(recs, str(path))
    rows = read_metrics_csv(str(path))
    assert rows[0]["l1_error"] == "0.25" and rows[1]["l1_error"] == ""
    assert [int(r["states_visited"]) for r in rows] == [10, 20]


# -- training loop -------------------------------------------------------------------

@pytest.mark.parametrize("algo", ["qm", "fm", "tb"])
def test_training_accounting(algo):
    env = Hypergrid(HypergridConfig(H=4, D=2))
    tr = make_trainer(env, algo, steps=6, eval_every=3, batch_size=5)
    lengths = []
    orig = tr.train_step

    def step():
        before = tr.states_visited
        value = orig()
        lengths.append(tr.states_visited - before)
        return value

    tr.train_step = step
    recs = tr.run()
    assert [r.step for r in recs] == [3, 6]
    assert recs[-1].states_visited == sum(lengths) == tr.states_visited
    assert all(r.l1_exact is not None and 0 <= r.l1_exact <= 2 for r in recs)
    assert recs[0].modes_found <= recs[1].modes_found <= 4
    assert len(tr.buffer) == 30


def test_violation_rate_zero_without_risky_visits():
    env = Hypergrid(HypergridConfig(H=4, D=2))
    recs = make_trainer(env, "fm", steps=2, eval_every=2).run()
    assert recs[-1].violation_rate == 0.0


def test_qm_trains_on_risky_grid():
    env = RiskyHypergrid(RiskyConfig())
    init, train = make_rngs(0)
    agent = QMAgent(env, init, hidden=16, distortion=DistortionMeasure("cvar", 0.1))
    tr = Trainer(env, agent, TrainConfig(steps=4, eval_every=2, lr=1e-3), train)
    recs = tr.run()
    assert 0.0 <= recs[-1].violation_rate <= 1.0
    assert recs[-1].l1_error is None


def test_seqgen_training_runs():
    env = SeqEnv(SeqConfig(6, ("000000", "111111")))
    recs = make_trainer(env, "qm", steps=3, eval_every=3, epsilon=0.005).run()
    assert recs[-1].states_visited == 3 * 16 * 7


def test_identical_seeds_identical_metrics(tmp_path):
    env = Hypergrid(HypergridConfig(H=4, D=2))
    paths = []
    for k in range(2):
        tr = make_trainer(env, "qm", seed=5, steps=6, eval_every=2)
        tr.run()
        paths.append(tmp_path / f"run{k}.csv")
        write_metrics_csv(tr.records, str(paths[-1]))
    assert paths[0].read_bytes() == paths[1].read_bytes()


# -- checkpoints -----------------------------------------------------------------------

def test_checkpoint_roundtrip_policy(tmp_path):
    env = Hypergrid(HypergridConfig(H=5, D=2))
    tr = make_trainer(env, "qm", steps=3, eval_every=3)
    tr.run()
    path = str(tmp_path / "ck.bin")
    tr.save(path, meta={"note": "x"})
    fresh = make_trainer(env, "qm", seed=99, steps=3)
    assert fresh.load(path) == {"note": "x"}
    for k, p in tr.agent.params.items():
        np.testing.assert_array_equal(fresh.agent.params[k].data, p.data)
        np.testing.assert_array_equal(fresh.adam.m[k], tr.adam.m[k])
    rng = np.random.default_rng(0)
    states = [s for s in env.enumerate_states() if not env.is_terminal(s)]
    picks = [states[i] for i in rng.integers(len(states), size=100)]
    np.testing.assert_array_equal(fresh.agent.exact_policy(picks), tr.agent.exact_policy(picks))
    np.testing.assert_array_equal(fresh.rng.uniform(size=5), tr.rng.uniform(size=5))


@pytest.mark.parametrize("algo", ["qm", "tb"])
def test_resume_matches_uninterrupted(tmp_path, algo):
    env = Hypergrid(HypergridConfig(H=4, D=2))
    full = make_trainer(env, algo, seed=2, steps=8, eval_every=2)
    full.run()
    half = make_trainer(env, algo, seed=2, steps=8, eval_every=2)
    half.run(steps=4)
    path = str(tmp_path / "half.bin")
    half.save(path)
    resumed = make_trainer(env, algo, seed=7, steps=8, eval_every=2)
    resumed.load(path)
    resumed.run()
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_metrics_csv(full.records, str(a))
    write_metrics_csv(resumed.records, str(b))
    assert a.read_bytes() == b.read_bytes()
    for k, p in full.agent.params.items():
        np.testing.assert_array_equal(resumed.agent.params[k].data, p.data)


def test_corrupted_checkpoints_rejected(tmp_path):
    env = Hypergrid(HypergridConfig(H=4, D=2))
    tr = make_trainer(env, "fm", steps=1)
    tr.run()
    path = tmp_path / "ck.bin"
    tr.save(str(path))
    data = path.read_bytes()
    before = {k: p.data.copy() for k, p in tr.agent.params.items()}
    for name, blob in [("trunc", data[: len(data) // 2]), ("flip", data[:100] + bytes([data[100] ^ 1]) + data[101:]),
                       ("junk", b"hello")]:
        bad = tmp_path / name
        bad.write_bytes(blob)
        with pytest.raises(CheckpointError):
            tr.load(str(bad))
    for k, p in tr.agent.params.items():
        np.testing.assert_array_equal(p.data, before[k])


def test_checkpoint_model_mismatch(tmp_path):
    env = Hypergrid(HypergridConfig(H=4, D=2))
    tr = make_trainer(env, "fm", steps=1)
    path = str(tmp_path / "ck.bin")
    tr.save(path)
    other = make_trainer(env, "qm", steps=1)
    with pytest.raises(CheckpointError):
        other.load(path)


def test_checkpoint_write_is_atomic(tmp_path):
    env = Hypergrid(HypergridConfig(H=4, D=2))
    tr = make_trainer(env, "fm", steps=1)
    path = tmp_path / "ck.bin"
    tr.save(str(path))
    tr.save(str(path))
    assert sorted(os.listdir(tmp_path)) == ["ck.bin"]


def test_fm_two_arm_moves_toward_geometric_mean():
    env = two_arm_env()
    tr = make_trainer(env, "fm", seed=0, steps=300, eval_every=300, batch_size=16)
    tr.run()
    p = exact_terminating_probabilities(env, tr.agent.exact_policy)
    assert 0.5 < p[("arm", 1)] < 0.8
