"""Quantile-function utilities: pinball loss, distortion risk measures,
distorted expectations, the standard normal CDF and its inverse, and a
checker for adding quantile functions of comonotone variables."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.special import erfc

from . import autodiff as ad
from .autodiff import Tensor

# Acklam's rational approximation coefficients for the inverse normal CDF.
_A = (-3.969683028665376e01, 2.209460984245205e02, -2.759285104469687e02,
      1.383577518672690e02, -3.066479806614716e01, 2.506628277459239e00)
_B = (-5.447609879822406e01, 1.615858368580409e02, -1.556989798598866e02,
      6.680131188771972e01, -1.328068155288572e01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e00,
      -2.549732539343734e00, 4.374664141464968e00, 2.938163982698783e00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e00,
      3.754408661907416e00)
_P_LOW = 0.02425


def normal_cdf(x):
    x = np.asarray(x, dtype=np.float64)
    out = 0.5 * erfc(-x / np.sqrt(2.0))
    return float(out) if out.ndim == 0 else out


def normal_pdf(x):
    return np.exp(-0.5 * np.asarray(x, dtype=np.float64) ** 2) / np.sqrt(2.0 * np.pi)


def normal_cdf_inv(p):
    """Inverse standard normal CDF for p in the open interval (0, 1).

    Rational approximation (relative error ~1e-9) followed by one Halley
    refinement step against :func:`normal_cdf`.
    """
    p = np.asarray(p, dtype=np.float64)
    if np.any((p <= 0) | (p >= 1)) or np.any(np.isnan(p)):
        raise ValueError("normal_cdf_inv requires 0 < p < 1")
    x = np.empty_like(p)
    low = p < _P_LOW
    high = p > 1 - _P_LOW
    mid = ~(low | high)

    q = np.sqrt(-2 * np.log(p[low]))
    x[low] = (((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
             ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    q = np.sqrt(-2 * np.log(1 - p[high]))
    x[high] = -(((((_C[0] * q + _C[1]) * q + _C[2]) * q + _C[3]) * q + _C[4]) * q + _C[5]) / \
              ((((_D[0] * q + _D[1]) * q + _D[2]) * q + _D[3]) * q + 1)
    q = p[mid] - 0.5
    r = q * q
    x[mid] = (((((_A[0] * r + _A[1]) * r + _A[2]) * r + _A[3]) * r + _A[4]) * r + _A[5]) * q / \
             (((((_B[0] * r + _B[1]) * r + _B[2]) * r + _B[3]) * r + _B[4]) * r + 1)

    # Halley step; skipped in the far tails where exp(x^2/2) overflows
    with np.errstate(over="ignore", invalid="ignore"):
        e = normal_cdf(x) - p
        u = e * np.sqrt(2 * np.pi) * np.exp(x * x / 2)
        refined = x - u / (1 + x * u / 2)
    x = np.where(np.isfinite(refined), refined, x)
    return float(x) if x.ndim == 0 else x


# -- distortion risk measures ------------------------------------------------

KINDS = ("identity", "cpw", "wang", "cvar")


@dataclass(frozen=True)
class DistortionMeasure:
    """Monotone map g: [0, 1] -> [0, 1] applied to quantile levels.

    identity: g(b) = b
    cpw:      b^eta / (b^eta + (1-b)^eta)^(1/eta), eta > 0
    wang:     Phi(Phi^-1(b) + eta); eta < 0 is risk averse
    cvar:     eta * b, eta in [0, 1]
    """

    kind: str = "identity"
    eta: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown distortion {self.kind!r}; expected one of {KINDS}")
        if self.kind == "cpw" and not self.eta > 0:
            raise ValueError("CPW requires eta > 0")
        if self.kind == "cvar" and not 0 <= self.eta <= 1:
            raise ValueError("CVaR requires eta in [0, 1]")

    def __call__(self, beta):
        return distortion_apply(self, beta)


IDENTITY = DistortionMeasure()


def distortion_apply(g: DistortionMeasure, beta):
    b = np.asarray(beta, dtype=np.float64)
    if np.any((b < 0) | (b > 1)) or np.any(np.isnan(b)):
        raise ValueError("quantile level must lie in [0, 1]")
    if g.kind == "identity":
        out = b.copy()
    elif g.kind == "cvar":
        out = g.eta * b
    elif g.kind == "cpw":
        if g.eta == 1.0:
            out = b.copy()
        else:
            num = b**g.eta
            out = num / (num + (1 - b) ** g.eta) ** (1 / g.eta)
    else:
        if g.eta == 0.0:
            out = b.copy()
        else:
            out = b.copy()
            inner = (b > 0) & (b < 1)
            if np.any(inner):
                out[inner] = normal_cdf(normal_cdf_inv(b[inner]) + g.eta)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


# -- pinball loss ------------------------------------------------------------

def _check_pinball(beta, kind, kappa):
    if kind not in ("l1", "huber"):
        raise ValueError(f"unknown pinball kind {kind!r}")
    if kind == "huber" and not kappa > 0:
        raise ValueError("huber kappa must be positive")
    b = np.asarray(beta, dtype=np.float64)
    if np.any((b < 0) | (b > 1)):
        raise ValueError("quantile level must lie in [0, 1]")
    return b


def pinball_loss(delta, beta, kind: str = "l1", kappa: float = 1.0):
    """|beta - 1{delta < 0}| * l(delta) on plain numbers or arrays."""
    b = _check_pinball(beta, kind, kappa)
    d = np.asarray(delta, dtype=np.float64)
    weight = np.abs(b - (d < 0))
    if kind == "l1":
        base = np.abs(d)
    else:
        base = np.where(np.abs(d) <= kappa, d * d / (2 * kappa), np.abs(d) - kappa / 2)
    out = weight * base
    return float(out) if out.ndim == 0 else out


def pinball_tensor(delta: Tensor, beta, kind: str = "huber", kappa: float = 1.0) -> Tensor:
    """Differentiable pinball loss; ``beta`` broadcasts against ``delta``."""
    b = _check_pinball(beta, kind, kappa)
    weight = np.abs(b - (delta.data < 0))
    if kind == "l1":
        base = ad.absolute(delta)
    else:
        small = np.abs(delta.data) <= kappa
        base = ad.where(small, ad.square(delta) * (0.5 / kappa), ad.absolute(delta) - kappa / 2)
    return base * weight


# -- quantile functions --------------------------------------------------------

class QuantileFunction:
    """A map from levels in [0, 1] to values, tagged by representation."""

    tag = "analytic"

    def __init__(self, fn: Callable, tag: str | None = None, check_monotone: bool = True):
        self.fn = fn
        if tag is not None:
            self.tag = tag
        if check_monotone and self.tag != "implicit":
            grid = np.linspace(0, 1, 257)
            vals = np.asarray(fn(grid), dtype=np.float64)
            if np.any(np.diff(vals) < -1e-12):
                raise ValueError("quantile function must be nondecreasing")

    def __call__(self, beta):
        return self.fn(np.asarray(beta, dtype=np.float64))


class ExplicitGrid(QuantileFunction):
    """Quantiles stored at levels (k - 1/2)/M; a discrete law with M equal atoms."""

    tag = "explicit"

    def __init__(self, values):
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("explicit grid needs a nonempty vector")
        if np.any(np.diff(values) < 0):
            raise ValueError("explicit grid values must be sorted")
        self.values = values
        super().__init__(self._evaluate, check_monotone=False)

    @property
    def size(self) -> int:
        return self.values.size

    @property
    def levels(self) -> np.ndarray:
        return (np.arange(self.size) + 0.5) / self.size

    def _evaluate(self, beta):
        idx = np.clip(np.ceil(beta * self.size).astype(int) - 1, 0, self.size - 1)
        return self.values[idx]

    def cdf(self, z):
        return np.searchsorted(self.values, np.asarray(z, dtype=np.float64), side="right") / self.size

    @classmethod
    def from_atoms(cls, atoms, probs, resolution: int) -> "ExplicitGrid":
        """Discretize a finite distribution at ``resolution`` midpoint levels."""
        return cls(discrete_quantile(atoms, probs)((np.arange(resolution) + 0.5) / resolution))


def discrete_quantile(atoms, probs) -> QuantileFunction:
    """Generalized inverse CDF of a finite distribution."""
    atoms = np.asarray(atoms, dtype=np.float64)
    probs = np.asarray(probs, dtype=np.float64)
    if atoms.shape != probs.shape or np.any(probs < 0) or not np.isclose(probs.sum(), 1.0):
        raise ValueError("atoms and probabilities do not describe a distribution")
    order = np.argsort(atoms)
    atoms, cum = atoms[order], np.cumsum(probs[order])
    cum[-1] = 1.0

    def fn(beta):
        idx = np.searchsorted(cum, beta, side="left")
        return atoms[np.clip(idx, 0, atoms.size - 1)]

    return QuantileFunction(fn, tag="analytic")


def distorted_expectation(q: Callable, g: DistortionMeasure = IDENTITY, n: int = 64,
                          rng: np.random.Generator | None = None) -> float:
    """Average of Q(g(beta_i)) over n levels.

    Levels are i.i.d. uniform when ``rng`` is given, otherwise the midpoint
    grid (i - 1/2)/n.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    betas = rng.uniform(size=n) if rng is not None else (np.arange(n) + 0.5) / n
    return float(np.mean(q(distortion_apply(g, betas))))


def sum_quantile_oracle(*grids: ExplicitGrid) -> ExplicitGrid:
    """Pointwise sum of quantile grids sharing a resolution."""
    if not grids:
        raise ValueError("need at least one grid")
    sizes = {g.size for g in grids}
    if len(sizes) != 1:
        raise ValueError(f"grids have mismatched resolutions {sorted(sizes)}")
    return ExplicitGrid(np.sum([g.values for g in grids], axis=0))


def comonotone_sum_check(quantiles, summed: ExplicitGrid, n_samples: int,
                         rng: np.random.Generator) -> float:
    """Kolmogorov distance between a sampled comonotone sum and ``summed``.

    Draws one uniform level per sample, evaluates every component quantile
    function at that same level, adds them, and compares the empirical CDF
    of the sums to the CDF implied by ``summed``.
    """
    u = rng.uniform(size=n_samples)
    samples = np.sort(np.sum([np.asarray(q(u)) for q in quantiles], axis=0))
    points = np.unique(np.concatenate([samples, summed.values]))
    ecdf_right = np.searchsorted(samples, points, side="right") / n_samples
    ecdf_left = np.searchsorted(samples, points, side="left") / n_samples
    model_right = summed.cdf(points)
    model_left = np.searchsorted(summed.values, points, side="left") / summed.size
    return float(max(np.max(np.abs(ecdf_right - model_right)), np.max(np.abs(ecdf_left - model_left))))


def pinball_minimizer(samples, beta: float, candidates, kind: str = "l1") -> float:
    """Candidate value minimizing the mean pinball loss of ``samples - x``."""
    samples = np.asarray(samples, dtype=np.float64)
    candidates = np.asarray(candidates, dtype=np.float64)
    losses = pinball_loss(samples[None, :] - candidates[:, None], beta, kind).mean(axis=1)
    return float(candidates[np.argmin(losses)])
