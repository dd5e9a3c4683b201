"""Autoregressive binary sequences scored by edit distance to a target set."""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .env import Env

BLOCKS = ("00000000", "11111111", "11110000", "00001111", "00111100")


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance with a rolling DP row."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, 1):
        cur = [i]
        for j, cb in enumerate(b, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def build_targets(length: int, count: int, rng: np.random.Generator, min_distance: int = 3,
                  max_tries: int = 10_000) -> tuple[str, ...]:
    """Targets made by concatenating random blocks, truncated to ``length``.

    Candidates closer than ``min_distance`` to an accepted target are
    redrawn so that distance-1 neighbourhoods never overlap.
    """
    n_blocks = -(-length // len(BLOCKS[0]))
    targets: list[str] = []
    for _ in range(max_tries):
        if len(targets) == count:
            break
        picks = rng.integers(len(BLOCKS), size=n_blocks)
        cand = "".join(BLOCKS[i] for i in picks)[:length]
        if all(levenshtein(cand, t) >= min_distance for t in targets):
            targets.append(cand)
    if len(targets) < count:
        raise ValueError(f"could not build {count} separated targets of length {length}")
    return tuple(targets)


@dataclass(frozen=True)
class SeqConfig:
    length: int = 12
    targets: tuple = ()

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("length must be positive")
        if not self.targets:
            raise ValueError("target set is empty")
        for t in self.targets:
            if len(t) != self.length or set(t) - {"0", "1"}:
                raise ValueError(f"target {t!r} is not a binary string of length {self.length}")


def seq_reward(x: str, cfg: SeqConfig) -> float:
    if len(x) != cfg.length:
        raise ValueError(f"sequence of length {len(x)} is not terminal (length {cfg.length})")
    return math.exp(-min(levenshtein(x, m) for m in cfg.targets))


class SeqEnv(Env):
    """Append one bit per step; at full length only the stop action remains.

    States are ``(bits, stopped)`` with ``bits`` a tuple of 0/1 ints.
    """

    n_actions = 3
    stop = 2
    max_parents = 1

    def __init__(self, cfg: SeqConfig):
        self.cfg = cfg
        self.n_modes = len(set(cfg.targets))
        self._distances = lru_cache(maxsize=200_000)(self._nearest)

    @property
    def initial_state(self):
        return ((), False)

    def state_count(self) -> int:
        return 2 ** (self.cfg.length + 1) - 1 + 2**self.cfg.length

    def children(self, s):
        bits, stopped = s
        if stopped:
            return []
        if len(bits) == self.cfg.length:
            return [(self.stop, (bits, True))]
        return [(0, (bits + (0,), False)), (1, (bits + (1,), False))]

    def parents(self, s):
        bits, stopped = s
        if stopped:
            return [((bits, False), self.stop)]
        if not bits:
            return []
        return [((bits[:-1], False), bits[-1])]

    def is_terminal(self, s) -> bool:
        return bool(s[1])

    def action_mask(self, states):
        mask = np.zeros((len(states), 3), dtype=bool)
        for i, (bits, stopped) in enumerate(states):
            if stopped:
                continue
            if len(bits) == self.cfg.length:
                mask[i, 2] = True
            else:
                mask[i, :2] = True
        return mask

    def encode(self, states):
        """One-hot per position (zero padded to L) plus the filled fraction."""
        L = self.cfg.length
        out = np.zeros((len(states), 2 * L + 1))
        for i, (bits, _) in enumerate(states):
            if bits:
                idx = 2 * np.arange(len(bits)) + np.asarray(bits)
                out[i, idx] = 1.0
            out[i, -1] = len(bits) / L
        return out

    @staticmethod
    def as_string(s) -> str:
        return "".join(map(str, s[0]))

    def _nearest(self, text: str) -> tuple[int, int]:
        dists = [levenshtein(text, m) for m in self.cfg.targets]
        k = int(np.argmin(dists))
        return dists[k], k

    def reward_support(self, x):
        d, _ = self._distances(self.as_string(x))
        return [(math.exp(-d), 1.0)]

    def mode_of(self, x):
        d, k = self._distances(self.as_string(x))
        return self.cfg.targets[k] if d <= 1 else None
