"""MLP layers, the cosine embedding of quantile levels, and Adam."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

LEAKY_SLOPE = 0.01


def init_linear(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[np.ndarray, np.ndarray]:
    bound = np.sqrt(1.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
    b = rng.uniform(-bound, bound, size=(fan_out,))
    return w, b


class Mlp:
    """Stack of dense layers with LeakyReLU (or ReLU) between them.

    Parameters are kept in ``self.params`` keyed ``"{prefix}W{i}"`` and
    ``"{prefix}b{i}"`` so that several modules can share one flat dict.
    """

    def __init__(self, sizes, rng, activation: str = "leaky_relu", prefix: str = "", params=None):
        if len(sizes) < 2:
            raise ValueError("an MLP needs at least input and output sizes")
        if activation not in ("leaky_relu", "relu"):
            raise ValueError(f"unknown activation {activation!r}")
        self.sizes = list(sizes)
        self.activation = activation
        self.prefix = prefix
        self.params = params if params is not None else {}
        for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
            w, b = init_linear(rng, n_in, n_out)
            self.params[f"{prefix}W{i}"] = ad.parameter(w, f"{prefix}W{i}")
            self.params[f"{prefix}b{i}"] = ad.parameter(b, f"{prefix}b{i}")

    @property
    def depth(self) -> int:
        return len(self.sizes) - 1

    def act(self, x: Tensor) -> Tensor:
        return ad.leaky_relu(x, LEAKY_SLOPE) if self.activation == "leaky_relu" else ad.relu(x)

    def layer(self, i: int, x: Tensor) -> Tensor:
        return x @ self.params[f"{self.prefix}W{i}"] + self.params[f"{self.prefix}b{i}"]

    def __call__(self, x, start: int = 0, stop: int | None = None, final_activation: bool = False) -> Tensor:
        """Apply layers ``start..stop-1``; activation after every layer but the last."""
        stop = self.depth if stop is None else stop
        h = ad.as_tensor(x)
        for i in range(start, stop):
            h = self.layer(i, h)
            if i < stop - 1 or final_activation:
                h = self.act(h)
        return h


def cosine_basis(betas, n_features: int) -> np.ndarray:
    """cos(pi * i * beta) for i = 0..n_features, one row per level."""
    betas = np.atleast_1d(np.asarray(betas, dtype=np.float64))
    if np.any((betas < 0) | (betas > 1)):
        raise ValueError("quantile levels must lie in [0, 1]")
    i = np.arange(n_features + 1, dtype=np.float64)
    return np.cos(np.pi * betas[:, None] * i[None, :])


def fourier_features(beta, n_features: int, biases, weights=None) -> Tensor:
    """Embedding ReLU(sum_i cos(pi*i*beta) * w_ij + b_j), j = 1..n_features.

    ``weights`` defaults to all ones, which reduces to the plain sum of
    cosines.  ``beta`` may be a scalar or a vector of levels; the result has
    one row per level.  Levels are constants; gradients reach the biases
    (and weights when given as tensors).
    """
    if n_features < 1:
        raise ValueError("n_features must be >= 1")
    scalar = np.ndim(beta) == 0
    basis = cosine_basis(beta, n_features)
    biases = ad.as_tensor(biases)
    if biases.shape != (n_features,):
        raise ValueError(f"biases must have length {n_features}")
    if weights is None:
        pre = Tensor(np.repeat(basis.sum(axis=1, keepdims=True), n_features, axis=1)) + biases
    else:
        pre = Tensor(basis) @ ad.as_tensor(weights) + biases
    out = ad.relu(pre)
    return out.reshape((n_features,)) if scalar else out


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState) -> bool:
    """One bias-corrected Adam update applied to ``params`` in place.

    ``params`` maps names to leaf tensors, ``grads`` maps the same names to
    arrays.  A non-finite gradient skips the whole step (nothing changes)
    and returns False.
    """
    if state.lr <= 0:
        raise ValueError("learning rate must be positive")
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
    if not all(np.all(np.isfinite(grads[name])) for name in params):
        log.warning("non-finite gradient at step %d, update skipped", state.step)
        return False
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True
