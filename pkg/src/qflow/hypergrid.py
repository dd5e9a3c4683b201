"""Hypergrid environments.

A state is ``(coords, stopped)``.  Action ``d < D`` increments coordinate
``d``; action ``D`` stops, producing the terminal ``(coords, True)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from .env import Env


@dataclass(frozen=True)
class HypergridConfig:
    H: int = 8
    D: int = 2
    R0: float = 1e-3
    R1: float = 0.5
    R2: float = 2.0

    def __post_init__(self):
        if int(self.H) != self.H or self.H < 2:
            raise ValueError("H must be an integer >= 2")
        if int(self.D) != self.D or self.D < 1:
            raise ValueError("D must be an integer >= 1")
        if not self.R0 > 0:
            raise ValueError("R0 must be strictly positive")
        if self.R1 < 0 or self.R2 < 0:
            raise ValueError("R1 and R2 must be nonnegative")


SPARSE_R0 = (1e-4, 1e-5, 1e-6, 1e-7, 1e-8, 1e-9)


def _check_coords(x, cfg: HypergridConfig) -> np.ndarray:
    arr = np.asarray(x)
    if arr.shape != (cfg.D,) or np.any(arr < 0) or np.any(arr > cfg.H - 1):
        raise ValueError(f"coordinates {tuple(x)} outside a {cfg.H}^{cfg.D} grid")
    return arr


def _indicators(x, cfg: HypergridConfig) -> tuple[bool, bool]:
    ax = np.abs(_check_coords(x, cfg) / (cfg.H - 1) - 0.5)
    outer = bool(np.all((ax > 0.25) & (ax <= 0.5)))
    inner = bool(np.all((ax > 0.3) & (ax < 0.4)))
    return outer, inner


def grid_reward(x, cfg: HypergridConfig) -> float:
    outer, inner = _indicators(x, cfg)
    return cfg.R0 + cfg.R1 * outer + cfg.R2 * inner


def orthant(x, cfg: HypergridConfig) -> tuple:
    return tuple(int(v > (cfg.H - 1) / 2) for v in x)


def mode_membership(x, cfg: HypergridConfig):
    """Orthant label of x if it sits in a mode (inner region), else None."""
    _, inner = _indicators(x, cfg)
    return orthant(x, cfg) if inner else None


class Hypergrid(Env):
    stochastic = False

    def __init__(self, cfg: HypergridConfig):
        self.cfg = cfg
        self.n_actions = cfg.D + 1
        self.max_parents = cfg.D
        self.n_modes = 2**cfg.D if cfg.H >= 7 else len({mode_membership(x, cfg) for x in self.cells()} - {None})

    @property
    def stop(self) -> int:
        return self.cfg.D

    @property
    def initial_state(self):
        return ((0,) * self.cfg.D, False)

    def cells(self):
        return product(range(self.cfg.H), repeat=self.cfg.D)

    def state_count(self) -> int:
        return 2 * self.cfg.H**self.cfg.D

    def children(self, s):
        coords, stopped = s
        if stopped:
            return []
        out = []
        for d in range(self.cfg.D):
            if coords[d] < self.cfg.H - 1:
                nxt = list(coords)
                nxt[d] += 1
                out.append((d, (tuple(nxt), False)))
        out.append((self.stop, (coords, True)))
        return out

    def parents(self, s):
        coords, stopped = s
        if stopped:
            return [((coords, False), self.stop)]
        out = []
        for d in range(self.cfg.D):
            if coords[d] > 0:
                prev = list(coords)
                prev[d] -= 1
                out.append(((tuple(prev), False), d))
        return out

    def is_terminal(self, s) -> bool:
        return bool(s[1])

    def action_mask(self, states):
        coords = np.array([s[0] for s in states], dtype=np.int64).reshape(len(states), self.cfg.D)
        stopped = np.array([s[1] for s in states], dtype=bool)
        mask = np.ones((len(states), self.n_actions), dtype=bool)
        mask[:, : self.cfg.D] = coords < self.cfg.H - 1
        mask[stopped] = False
        return mask

    def encode(self, states):
        """Concatenated per-coordinate one-hot vectors, length H*D."""
        H, D = self.cfg.H, self.cfg.D
        coords = np.array([s[0] for s in states], dtype=np.int64).reshape(len(states), D)
        out = np.zeros((len(states), H * D))
        rows = np.repeat(np.arange(len(states)), D)
        cols = (coords + H * np.arange(D)[None, :]).ravel()
        out[rows, cols] = 1.0
        return out

    def reward_support(self, x):
        return [(grid_reward(x[0], self.cfg), 1.0)]

    def mode_of(self, x):
        return mode_membership(x[0], self.cfg)

    def enumerate_states(self):
        cached = getattr(self, "_topo_cache", None)
        if cached is None:
            cells = sorted(self.cells(), key=sum)
            order = []
            for c in cells:
                order.append((c, False))
            order += [(c, True) for c in cells]
            self._topo_cache = order
        return self._topo_cache


@dataclass(frozen=True)
class RiskyConfig:
    base: HypergridConfig = HypergridConfig(H=8, D=2, R0=0.1)
    risky_orthants: tuple | None = None
    p: float = 0.3
    low: float = 0.1
    mode_reward: float = 2.6
    outer_reward: float = 0.6

    def __post_init__(self):
        if not 0 <= self.p <= 1:
            raise ValueError("risky trigger probability must be in [0, 1]")
        if not self.low > 0:
            raise ValueError("low reward must be positive")

    def orthants(self) -> frozenset:
        if self.risky_orthants is not None:
            return frozenset(tuple(o) for o in self.risky_orthants)
        D = self.base.D
        if D == 2:
            return frozenset({(0, 0), (1, 1)})
        return frozenset(o for o in product((0, 1), repeat=D) if sum(o) % 2 == 0)


class RiskyHypergrid(Hypergrid):
    """Hypergrid whose risky corner blocks pay ``low`` with probability ``p``.

    A cell is risky when it lies in the high-reward block (outer indicator)
    of a risky orthant.  Mode counting only covers the non-risky orthants.
    """

    stochastic = True

    def __init__(self, cfg: RiskyConfig):
        super().__init__(cfg.base)
        self.risky_cfg = cfg
        self.risky_set = cfg.orthants()
        self.n_modes = 2**cfg.base.D - len(self.risky_set)

    def is_risky_cell(self, coords) -> bool:
        outer, _ = _indicators(coords, self.cfg)
        return outer and orthant(coords, self.cfg) in self.risky_set

    def is_risky(self, x) -> bool:
        return self.is_risky_cell(x[0])

    def reward_support(self, x):
        coords = x[0]
        if not self.is_risky_cell(coords):
            return [(grid_reward(coords, self.cfg), 1.0)]
        _, inner = _indicators(coords, self.cfg)
        rc = self.risky_cfg
        base = rc.mode_reward if inner else rc.outer_reward
        return [(rc.low, rc.p), (base, 1.0 - rc.p)]

    def reward(self, x, rng):
        support = self.reward_support(x)
        if len(support) == 1:
            return support[0][0]
        return support[0][0] if rng.uniform() < self.risky_cfg.p else support[1][0]

    def mode_of(self, x):
        label = mode_membership(x[0], self.cfg)
        return None if label is None or label in self.risky_set else label


def risky_reward(x, cfg: RiskyConfig, rng) -> float:
    return RiskyHypergrid(cfg).reward((tuple(x), True), rng)
