"""DAG environment contract and exact oracles.

States are hashable, JSON-friendly values (nested tuples of ints/bools).
Terminal objects are ordinary states for which ``is_terminal`` holds, so the
set of objects is literally a subset of the state space.
"""
from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np

State = Hashable

MAX_ENUMERABLE = 10**7


class EnumerationError(RuntimeError):
    pass


class Env:
    """Base class for finite DAG environments.

    Subclasses provide ``initial_state``, ``n_actions``, ``children``,
    ``parents``, ``is_terminal``, ``reward_support`` and ``encode``.
    ``reward_support`` returns the finite law of R(x) as (value, prob)
    pairs; deterministic rewards use a single pair.
    """

    n_actions: int = 0
    stochastic: bool = False
    max_parents: int = 1
    n_modes: int = 0

    @property
    def initial_state(self) -> State:
        raise NotImplementedError

    def children(self, s) -> list[tuple[int, State]]:
        raise NotImplementedError

    def parents(self, s) -> list[tuple[State, int]]:
        raise NotImplementedError

    def is_terminal(self, s) -> bool:
        raise NotImplementedError

    def reward_support(self, x) -> list[tuple[float, float]]:
        raise NotImplementedError

    def encode(self, states: Sequence[State]) -> np.ndarray:
        raise NotImplementedError

    @property
    def encoding_dim(self) -> int:
        return self.encode([self.initial_state]).shape[1]

    def state_count(self) -> int | None:
        """Number of states if known in closed form, else None."""
        return None

    # -- derived helpers ----------------------------------------------------
    def action_mask(self, states: Sequence[State]) -> np.ndarray:
        mask = np.zeros((len(states), self.n_actions), dtype=bool)
        for i, s in enumerate(states):
            for a, _ in self.children(s):
                mask[i, a] = True
        return mask

    def parent_action_mask(self, states: Sequence[State]) -> np.ndarray:
        mask = np.zeros((len(states), self.n_actions), dtype=bool)
        for i, s in enumerate(states):
            for _, a in self.parents(s):
                mask[i, a] = True
        return mask

    def step(self, s, action: int) -> State:
        for a, nxt in self.children(s):
            if a == action:
                return nxt
        raise ValueError(f"action {action} is not available in state {s!r}")

    def reward(self, x, rng: np.random.Generator) -> float:
        """Draw R(x).  Deterministic rewards consume no randomness."""
        support = self.reward_support(x)
        if len(support) == 1:
            return float(support[0][0])
        u = rng.uniform()
        acc = 0.0
        for value, prob in support:
            acc += prob
            if u < acc:
                return float(value)
        return float(support[-1][0])

    def expected_reward(self, x) -> float:
        return float(sum(v * p for v, p in self.reward_support(x)))

    def expected_log_reward(self, x) -> float:
        support = self.reward_support(x)
        if any(v <= 0 for v, p in support if p > 0):
            raise ValueError(f"reward support of {x!r} has non-positive values")
        return float(sum(p * math.log(v) for v, p in support if p > 0))

    def mode_of(self, x):
        """Identifier of the mode x belongs to, or None."""
        return None

    def is_risky(self, x) -> bool:
        return False

    def key(self, s) -> str:
        """Canonical text encoding; injective within an environment."""
        return json.dumps(to_jsonable(s), separators=(",", ":"))

    # -- enumeration --------------------------------------------------------
    def enumerate_states(self) -> list[State]:
        """All states reachable from the initial state, in topological order."""
        cached = getattr(self, "_topo_cache", None)
        if cached is not None:
            return cached
        known = self.state_count()
        if known is not None and known > MAX_ENUMERABLE:
            raise EnumerationError(f"{type(self).__name__} has {known} states; refusing to enumerate")
        order = topological_order(self)
        self._topo_cache = order
        return order

    def terminal_states(self) -> list[State]:
        return [s for s in self.enumerate_states() if self.is_terminal(s)]


def to_jsonable(s):
    if isinstance(s, (tuple, list)):
        return [to_jsonable(v) for v in s]
    if isinstance(s, (np.integer,)):
        return int(s)
    return s


def from_jsonable(v):
    if isinstance(v, list):
        return tuple(from_jsonable(x) for x in v)
    return v


def topological_order(env: Env, limit: int = MAX_ENUMERABLE) -> list[State]:
    """Kahn's algorithm over the states reachable from the initial state.

    Also checks that children and parents agree on every edge.
    """
    s0 = env.initial_state
    if env.parents(s0):
        raise ValueError("initial state must have no parents")
    seen = {s0}
    stack = [s0]
    indeg: dict = {s0: 0}
    while stack:
        s = stack.pop()
        if env.is_terminal(s):
            if env.children(s):
                raise ValueError(f"terminal state {s!r} has children")
            continue
        kids = env.children(s)
        if not kids:
            raise ValueError(f"non-terminal state {s!r} is a dead end")
        for a, c in kids:
            if (s, a) not in env.parents(c):
                raise ValueError(f"edge {s!r} -{a}-> {c!r} missing from parents()")
            indeg[c] = indeg.get(c, 0) + 1
            if c not in seen:
                seen.add(c)
                if len(seen) > limit:
                    raise EnumerationError("state space exceeds the enumeration limit")
                stack.append(c)
    for c in seen:
        if c != s0 and len(env.parents(c)) != indeg[c]:
            raise ValueError(f"parents() of {c!r} lists edges not produced by children()")
    order = []
    queue = deque([s0])
    remaining = dict(indeg)
    while queue:
        s = queue.popleft()
        order.append(s)
        if env.is_terminal(s):
            continue
        for _, c in env.children(s):
            remaining[c] -= 1
            if remaining[c] == 0:
                queue.append(c)
    if len(order) != len(seen):
        raise ValueError("state graph contains a cycle")
    return order


@dataclass
class Trajectory:
    states: list
    actions: list
    reward: float = float("nan")
    log_pf: list = field(default_factory=list)

    @property
    def terminal(self):
        return self.states[-1]

    def __len__(self) -> int:
        return len(self.actions)


def exact_terminating_probabilities(env: Env, policy: Callable, tol: float = 1e-9) -> dict:
    """P_T(x) for every terminal x by forward mass propagation.

    ``policy`` maps a list of non-terminal states to an array of action
    probabilities with one row per state.
    """
    order = env.enumerate_states()
    inner = [s for s in order if not env.is_terminal(s)]
    probs = np.asarray(policy(inner), dtype=np.float64)
    if probs.shape != (len(inner), env.n_actions):
        raise ValueError(f"policy returned shape {probs.shape}")
    mask = env.action_mask(inner)
    if np.any(probs[~mask] != 0) or np.any(probs < 0):
        raise ValueError("policy puts mass on unavailable actions")
    if np.max(np.abs(probs.sum(axis=1) - 1.0)) > tol:
        raise ValueError("policy is not normalized")
    row = {s: i for i, s in enumerate(inner)}
    mass = dict.fromkeys(order, 0.0)
    mass[env.initial_state] = 1.0
    for s in order:
        if env.is_terminal(s):
            continue
        p = probs[row[s]]
        m = mass[s]
        for a, c in env.children(s):
            mass[c] += m * p[a]
    return {s: mass[s] for s in order if env.is_terminal(s)}


def uniform_policy(env: Env) -> Callable:
    def policy(states):
        mask = env.action_mask(states).astype(np.float64)
        return mask / mask.sum(axis=1, keepdims=True)

    return policy


def partition_function(env: Env) -> float:
    """Z = sum of (expected) rewards over all terminal states."""
    return float(sum(env.expected_reward(x) for x in env.terminal_states()))


def target_distribution(env: Env) -> dict:
    """R(x) / Z over terminal states (expected rewards if stochastic)."""
    rewards = {x: env.expected_reward(x) for x in env.terminal_states()}
    z = sum(rewards.values())
    return {x: r / z for x, r in rewards.items()}


def geometric_mean_target(env: Env) -> dict:
    """Distribution proportional to exp(E[log R(x)])."""
    logs = {x: env.expected_log_reward(x) for x in env.terminal_states()}
    top = max(logs.values())
    w = {x: math.exp(v - top) for x, v in logs.items()}
    z = sum(w.values())
    return {x: v / z for x, v in w.items()}


def l1_distance(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return float(sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys))


# -- small environments ---------------------------------------------------------

class ChainEnv(Env):
    """States 0..n in a line; the last one is terminal."""

    n_actions = 1

    def __init__(self, length: int = 3, reward: float = 1.0):
        self.length = length
        self.r = reward

    @property
    def initial_state(self):
        return 0

    def children(self, s):
        return [] if s >= self.length else [(0, s + 1)]

    def parents(self, s):
        return [] if s == 0 else [(s - 1, 0)]

    def is_terminal(self, s):
        return s == self.length

    def reward_support(self, x):
        return [(self.r, 1.0)]

    def encode(self, states):
        out = np.zeros((len(states), self.length + 1))
        out[np.arange(len(states)), list(states)] = 1.0
        return out


class ArmsEnv(Env):
    """One decision from the root to one of K terminal arms.

    ``supports[k]`` is the reward law of arm k as (value, prob) pairs.
    """

    def __init__(self, supports: Sequence[Sequence[tuple[float, float]]]):
        self.supports = [[(float(v), float(p)) for v, p in sup] for sup in supports]
        for sup in self.supports:
            if any(v <= 0 for v, _ in sup) or not math.isclose(sum(p for _, p in sup), 1.0):
                raise ValueError("each arm needs positive values with probabilities summing to 1")
        self.n_actions = len(self.supports)
        self.stochastic = any(len(s) > 1 for s in self.supports)

    @property
    def initial_state(self):
        return ("root",)

    def children(self, s):
        return [(k, ("arm", k)) for k in range(self.n_actions)] if s == ("root",) else []

    def parents(self, s):
        return [(("root",), s[1])] if s[0] == "arm" else []

    def is_terminal(self, s):
        return s[0] == "arm"

    def reward_support(self, x):
        return self.supports[x[1]]

    def encode(self, states):
        return np.ones((len(states), 1))

    def state_count(self):
        return self.n_actions + 1


def two_arm_env() -> ArmsEnv:
    """Arms with rewards {1} and {1 w.p. 1/2, 4 w.p. 1/2}."""
    return ArmsEnv([[(1.0, 1.0)], [(1.0, 0.5), (4.0, 0.5)]])
