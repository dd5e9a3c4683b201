"""Flow models, the FM / TB / QM objectives, and policy extraction."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .env import Env, Trajectory
from .nn import Mlp, cosine_basis, init_linear
from .quantile import IDENTITY, DistortionMeasure, distortion_apply, pinball_tensor

log = logging.getLogger(__name__)

MASK = -1e9
LOG_CLAMP = -80.0


# -- models --------------------------------------------------------------------

class EdgeFlowModel:
    """MLP from a state encoding to one log edge flow per action."""

    def __init__(self, in_dim: int, n_actions: int, rng, hidden: int = 256, depth: int = 3):
        self.n_actions = n_actions
        self.mlp = Mlp([in_dim] + [hidden] * (depth - 1) + [n_actions], rng)
        self.params = self.mlp.params

    def log_flows(self, enc) -> Tensor:
        return self.mlp(enc)


class QuantileFlowModel:
    """Log edge-flow quantiles Z^log_beta(s -> s') for every action.

    implicit head: state -> one hidden layer, multiplied elementwise with a
    cosine embedding of beta, then two more dense layers.
    explicit head: an MLP emitting M values per action at the fixed levels
    (k - 1/2)/M; a level beta reads the value at index ceil(beta*M) - 1.
    """

    def __init__(self, in_dim: int, n_actions: int, rng, hidden: int = 256, fourier_dim: int | None = None,
                 head: str = "implicit", n_quantiles: int = 200):
        self.n_actions = n_actions
        self.head = head
        self.hidden = hidden
        if head == "implicit":
            self.fourier_dim = hidden if fourier_dim is None else fourier_dim
            if self.fourier_dim != hidden:
                raise ValueError("fourier_dim must equal the hidden width for the elementwise merge")
            self.mlp = Mlp([in_dim, hidden, hidden, n_actions], rng)
            self.params = self.mlp.params
            w, _ = init_linear(rng, self.fourier_dim + 1, self.fourier_dim)
            self.params["fourier_W"] = ad.parameter(w, "fourier_W")
            self.params["fourier_b"] = ad.parameter(rng.uniform(0.0, 1.0, size=self.fourier_dim), "fourier_b")
        elif head == "explicit":
            self.n_quantiles = n_quantiles
            self.mlp = Mlp([in_dim, hidden, hidden, n_actions * n_quantiles], rng)
            self.params = self.mlp.params
        else:
            raise ValueError(f"unknown quantile head {head!r}")

    @property
    def levels(self) -> np.ndarray:
        return (np.arange(self.n_quantiles) + 0.5) / self.n_quantiles

    def embed(self, betas: np.ndarray) -> Tensor:
        basis = Tensor(cosine_basis(betas.ravel(), self.fourier_dim))
        return ad.relu(basis @ self.params["fourier_W"] + self.params["fourier_b"])

    def log_quantiles(self, enc, betas) -> Tensor:
        """Shape [n_states, n_levels, n_actions].

        ``betas`` is either shared levels of shape [K] or per-state levels
        of shape [n_states, K].
        """
        enc = ad.as_tensor(enc)
        betas = np.asarray(betas, dtype=np.float64)
        n = enc.shape[0]
        k = betas.shape[-1]
        if self.head == "explicit":
            out = self.mlp(enc).reshape((n, self.n_actions, self.n_quantiles))
            idx = np.clip(np.ceil(betas * self.n_quantiles).astype(int) - 1, 0, self.n_quantiles - 1)
            if betas.ndim == 1:
                idx = np.broadcast_to(idx, (n, k))
            rows = np.arange(n)[:, None, None]
            acts = np.arange(self.n_actions)[None, None, :]
            return out[rows, acts, idx[:, :, None]]
        h = self.mlp(enc, stop=1, final_activation=True)
        phi = self.embed(betas)
        if betas.ndim == 1:
            merged = h.reshape((n, 1, self.hidden)) * phi.reshape((1, k, self.hidden))
        else:
            merged = h.reshape((n, 1, self.hidden)) * phi.reshape((n, k, self.hidden))
        out = self.mlp(merged.reshape((n * k, self.hidden)), start=1)
        return out.reshape((n, k, self.n_actions))


class TBModel:
    """MLP emitting forward and backward logits, plus a learnable log Z."""

    def __init__(self, in_dim: int, n_actions: int, rng, hidden: int = 256, depth: int = 3):
        self.n_actions = n_actions
        self.mlp = Mlp([in_dim] + [hidden] * (depth - 1) + [2 * n_actions], rng)
        self.params = self.mlp.params
        self.params["logZ"] = ad.parameter(np.zeros(1), "logZ")

    def logits(self, enc) -> tuple[Tensor, Tensor]:
        out = self.mlp(enc)
        a = self.n_actions
        return out[:, :a], out[:, a:]


# -- batching -------------------------------------------------------------------

@dataclass
class FlowBatch:
    """Index tables for evaluating in/out flows at a list of target states.

    ``unique`` holds every non-terminal state whose outgoing edges are
    needed.  For target i, ``in_rows[i, p]``/``in_acts[i, p]`` name the p-th
    incoming edge (padding flagged by ``in_pad``) and ``out_rows[i]`` is its
    own row, or -1 for terminal targets whose out-side is the log reward.
    """

    unique: list
    enc: np.ndarray
    mask: np.ndarray
    in_rows: np.ndarray
    in_acts: np.ndarray
    in_pad: np.ndarray
    out_rows: np.ndarray
    terminal: np.ndarray

    @classmethod
    def build(cls, env: Env, targets: Sequence) -> "FlowBatch":
        index: dict = {}
        unique: list = []

        def row(s):
            if s not in index:
                index[s] = len(unique)
                unique.append(s)
            return index[s]

        n = len(targets)
        plists = [env.parents(s) for s in targets]
        width = max(1, max((len(p) for p in plists), default=1))
        in_rows = np.zeros((n, width), dtype=np.int64)
        in_acts = np.zeros((n, width), dtype=np.int64)
        in_pad = np.ones((n, width), dtype=bool)
        out_rows = np.full(n, -1, dtype=np.int64)
        terminal = np.zeros(n, dtype=bool)
        for i, (s, plist) in enumerate(zip(targets, plists)):
            if not plist:
                raise ValueError(f"state {s!r} has no parents; flow losses need an in-flow")
            for p, (ps, a) in enumerate(plist):
                in_rows[i, p] = row(ps)
                in_acts[i, p] = a
                in_pad[i, p] = False
            if env.is_terminal(s):
                terminal[i] = True
            else:
                out_rows[i] = row(s)
        return cls(unique, env.encode(unique), env.action_mask(unique), in_rows, in_acts, in_pad,
                   out_rows, terminal)


def _log_rewards(batch: FlowBatch, log_rewards) -> np.ndarray:
    lr = np.zeros(len(batch.terminal))
    if batch.terminal.any():
        if log_rewards is None:
            raise ValueError("terminal targets need log rewards")
        lr[batch.terminal] = np.asarray(log_rewards, dtype=np.float64)[batch.terminal]
    return lr


# -- flow matching --------------------------------------------------------------

def fm_losses(model: EdgeFlowModel, batch: FlowBatch, log_rewards=None) -> Tensor:
    """Per-target squared log ratio of in-flow to out-flow (or to R at terminals)."""
    flows = model.log_flows(batch.enc)
    masked = flows + MASK * (~batch.mask)
    inflow = ad.logsumexp(flows[batch.in_rows, batch.in_acts] + MASK * batch.in_pad, axis=1)
    rows = np.where(batch.terminal, 0, batch.out_rows)
    outflow = ad.where(batch.terminal, _log_rewards(batch, log_rewards), ad.logsumexp(masked[rows], axis=1))
    return ad.square(inflow - outflow)


def fm_loss(model: EdgeFlowModel, state, env: Env, log_reward: float | None = None) -> Tensor:
    if env.is_terminal(state) and log_reward is None:
        log_reward = env.expected_log_reward(state)
    batch = FlowBatch.build(env, [state])
    return fm_losses(model, batch, [log_reward if log_reward is not None else 0.0]).sum()


# -- quantile matching ----------------------------------------------------------

def qm_deltas(model: QuantileFlowModel, batch: FlowBatch, betas, betas_tilde, log_rewards=None,
              target_grad: bool = True) -> Tensor:
    """delta[i, a, b] = out-flow at betas_tilde[b] minus in-flow at betas[a], shape [S, N, Ñ].

    Levels are either shared by every target (1-d arrays) or drawn per
    target (arrays of shape [S, N] and [S, Ñ]).  With ``target_grad=False``
    the out-flow side is a fixed regression target and only the in-flow
    quantiles receive gradient.
    """
    betas = np.atleast_1d(np.asarray(betas, dtype=np.float64))
    betas_tilde = np.atleast_1d(np.asarray(betas_tilde, dtype=np.float64))
    if betas.ndim != betas_tilde.ndim:
        raise ValueError("betas and betas_tilde must both be shared or both per target")
    s_count = len(batch.terminal)
    n, nt = betas.shape[-1], betas_tilde.shape[-1]
    rows = np.where(batch.terminal, 0, batch.out_rows)
    if betas.ndim == 1:
        q = model.log_quantiles(batch.enc, np.concatenate([betas, betas_tilde]))
        levels = np.arange(n)
        gathered = q[batch.in_rows[:, :, None], levels[None, None, :], batch.in_acts[:, :, None]]
        out_q = q[rows][:, n:, :]
    else:
        if betas.shape[0] != s_count or betas_tilde.shape[0] != s_count:
            raise ValueError("per-target levels need one row per target")
        width = batch.in_rows.shape[1]
        pair_enc = batch.enc[batch.in_rows.reshape(-1)]
        q_in = model.log_quantiles(pair_enc, np.repeat(betas, width, axis=0))  # [S*W, N, A]
        flat = np.arange(s_count * width).reshape(s_count, width)
        levels = np.arange(n)
        gathered = q_in[flat[:, :, None], levels[None, None, :], batch.in_acts[:, :, None]]
        out_q = model.log_quantiles(batch.enc[rows], betas_tilde)  # [S, Ñ, A]
    inflow = ad.logsumexp(gathered + MASK * batch.in_pad[:, :, None], axis=1)  # [S, N]
    outflow = ad.logsumexp(out_q + MASK * (~batch.mask[rows])[:, None, :], axis=2)  # [S, Ñ]
    lr = _log_rewards(batch, log_rewards)
    outflow = ad.where(batch.terminal[:, None], np.broadcast_to(lr[:, None], (s_count, nt)), outflow)
    if not target_grad:
        outflow = outflow.detach()
    return outflow.reshape((s_count, 1, nt)) - inflow.reshape((s_count, n, 1))


def qm_losses(model: QuantileFlowModel, batch: FlowBatch, betas, betas_tilde, log_rewards=None,
              kind: str = "huber", kappa: float = 1.0, target_grad: bool = True) -> Tensor:
    """(1/Ñ) sum_i sum_j rho_{beta_i}(delta^{beta_i, beta~_j}) for each target."""
    delta = qm_deltas(model, batch, betas, betas_tilde, log_rewards, target_grad)
    b = np.asarray(betas, dtype=np.float64)
    b = b.reshape(1, -1, 1) if b.ndim <= 1 else b[:, :, None]
    rho = pinball_tensor(delta, b, kind, kappa)
    return rho.sum(axis=2).sum(axis=1) * (1.0 / delta.shape[2])


def qm_delta(model: QuantileFlowModel, state, beta: float, beta_tilde: float, env: Env,
             log_reward: float | None = None) -> Tensor:
    if env.is_terminal(state) and log_reward is None:
        log_reward = env.expected_log_reward(state)
    batch = FlowBatch.build(env, [state])
    return qm_deltas(model, batch, [beta], [beta_tilde], [log_reward or 0.0]).reshape(())


def qm_loss(model: QuantileFlowModel, state, env: Env, n: int, n_tilde: int, rng: np.random.Generator,
            log_reward: float | None = None, kind: str = "huber", kappa: float = 1.0) -> Tensor:
    """QM objective at one state with freshly drawn, independent level sets.

    At a terminal state with a stochastic reward, ``log_reward`` defaults to
    the log of one fresh draw.
    """
    betas = rng.uniform(size=n)
    betas_tilde = rng.uniform(size=n_tilde)
    if env.is_terminal(state) and log_reward is None:
        log_reward = float(np.log(env.reward(state, rng)))
    batch = FlowBatch.build(env, [state])
    return qm_losses(model, batch, betas, betas_tilde, [log_reward or 0.0], kind, kappa).sum()


# -- trajectory balance --------------------------------------------------------

def _clamp_log(x: Tensor) -> Tensor:
    low = x.data < LOG_CLAMP
    if low.any():
        log.warning("log-probability below %.0f clamped", LOG_CLAMP)
        return ad.where(low, np.full(x.shape, LOG_CLAMP), x)
    return x


def tb_losses(model: TBModel, env: Env, trajectories: Sequence[Trajectory], rewards=None,
              backward: str = "learned") -> Tensor:
    """[log Z + sum log P_F - log R - sum log P_B]^2 per trajectory."""
    if backward not in ("learned", "uniform"):
        raise ValueError(f"unknown backward policy {backward!r}")
    src, dst, acts, owner = [], [], [], []
    for k, tau in enumerate(trajectories):
        for t, a in enumerate(tau.actions):
            src.append(tau.states[t])
            dst.append(tau.states[t + 1])
            acts.append(a)
            owner.append(k)
    acts = np.asarray(acts)
    seg = np.zeros((len(trajectories), len(acts)))
    seg[owner, np.arange(len(acts))] = 1.0
    seg = Tensor(seg)

    f_logits, _ = model.logits(env.encode(src))
    f_logp = ad.log_softmax(f_logits + MASK * (~env.action_mask(src)), axis=1)
    sum_pf = seg @ _clamp_log(f_logp[np.arange(len(acts)), acts]).reshape((len(acts), 1))

    if backward == "uniform":
        pb = np.array([-np.log(len(env.parents(s))) for s in dst])
        sum_pb = Tensor((seg.data @ pb).reshape(-1, 1))
    else:
        _, b_logits = model.logits(env.encode(dst))
        pmask = env.parent_action_mask(dst)
        b_logp = ad.log_softmax(b_logits + MASK * (~pmask), axis=1)
        picked = _clamp_log(b_logp[np.arange(len(acts)), acts])
        # one parent means P_B = 1 regardless of the logits
        single = pmask.sum(axis=1) == 1
        picked = ad.where(single, 0.0, picked)
        sum_pb = seg @ picked.reshape((len(acts), 1))

    if rewards is None:
        rewards = [tau.reward for tau in trajectories]
    log_r = np.log(np.asarray(rewards, dtype=np.float64)).reshape(-1, 1)
    diff = model.params["logZ"].reshape((1, 1)) + sum_pf - log_r - sum_pb
    return ad.square(diff).reshape((len(trajectories),))


def tb_loss(model: TBModel, trajectory: Trajectory, reward: float, env: Env, backward: str = "learned") -> Tensor:
    if not reward > 0:
        raise ValueError("reward must be positive")
    return tb_losses(model, env, [trajectory], [reward], backward).sum()


# -- policies ----------------------------------------------------------------------

def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    if np.any(~mask.any(axis=1)):
        raise ValueError("every action is masked")
    z = np.where(mask, logits, -np.inf)
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def policy_from_log_flows(log_flows: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """P_F(s'|s) = F(s->s') / sum of F over valid children."""
    return masked_softmax(np.asarray(log_flows, dtype=np.float64), mask)


def policy_from_edge_flows(model: EdgeFlowModel, env: Env, states: Sequence) -> np.ndarray:
    with ad.no_grad():
        flows = model.log_flows(env.encode(states)).data
    return policy_from_log_flows(flows, env.action_mask(states))


def qm_policy(model: QuantileFlowModel, env: Env, states: Sequence, n: int,
              g: DistortionMeasure = IDENTITY, rng: np.random.Generator | None = None,
              betas=None) -> np.ndarray:
    """Softmax over actions of the mean log quantile at levels g(beta_i).

    Each state gets its own batch of n uniform levels (or the rows of
    ``betas``), shared across that state's actions.  Without ``rng`` and
    ``betas`` the midpoint grid (i - 1/2)/n is used.
    """
    if betas is None:
        if rng is None:
            betas = np.broadcast_to((np.arange(n) + 0.5) / n, (len(states), n))
        else:
            betas = rng.uniform(size=(len(states), n))
    levels = distortion_apply(g, np.asarray(betas, dtype=np.float64))
    with ad.no_grad():
        q = model.log_quantiles(env.encode(states), levels).data
    return policy_from_log_flows(q.mean(axis=1), env.action_mask(states))


def crossing_rate(model: QuantileFlowModel, env: Env, states: Sequence, n_levels: int = 16) -> float:
    """Fraction of adjacent midpoint levels where a valid action's quantile decreases."""
    levels = (np.arange(n_levels) + 0.5) / n_levels
    with ad.no_grad():
        q = model.log_quantiles(env.encode(states), levels).data  # [S, K, A]
    drops = np.diff(q, axis=1) < 0
    valid = np.broadcast_to(env.action_mask(states)[:, None, :], drops.shape)
    return float(drops[valid].mean()) if valid.any() else 0.0


def tb_policy(model: TBModel, env: Env, states: Sequence) -> np.ndarray:
    with ad.no_grad():
        f_logits, _ = model.logits(env.encode(states))
    return masked_softmax(f_logits.data, env.action_mask(states))
