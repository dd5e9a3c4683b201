"""Small reverse-mode autodiff over float64 numpy arrays.

Every operation returns a new :class:`Tensor` that remembers its inputs and a
closure computing the local vector-Jacobian product.  Nodes are numbered in
creation order, so sorting reachable nodes by that number gives a valid
topological order of the recorded tape.
"""
from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Iterable, Sequence

import numpy as np

_counter = itertools.count()
_recording = True


class NonFiniteError(FloatingPointError):
    """Raised when NaN or Inf shows up at an op boundary."""


def _check_finite(data: np.ndarray, where: str) -> None:
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"non-finite values produced by {where}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    # sum out broadcast dimensions so grad matches the input shape
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    __slots__ = ("data", "parents", "backward_fn", "node_id", "name")
    __array_ufunc__ = None  # make numpy defer to Tensor operators

    def __init__(self, data, parents: Sequence["Tensor"] = (), backward_fn=None, name=None, _checked=False):
        arr = np.asarray(data, dtype=np.float64)
        if not _checked:
            _check_finite(arr, name or "tensor construction")
        self.data = arr
        self.parents = tuple(parents)
        self.backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = backward_fn
        self.node_id = next(_counter)
        self.name = name

    # -- basics -----------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single element, got shape {self.data.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        """Same values, cut from the tape (no gradient flows back)."""
        return Tensor(self.data, _checked=True)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # -- arithmetic -------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        n = self.data.size if axis is None else self.data.shape[axis]
        return tsum(self, axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def parameter(data, name: str | None = None) -> Tensor:
    """Leaf tensor meant to receive gradients."""
    return Tensor(np.array(data, dtype=np.float64, copy=True), name=name)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the tape (inference only)."""
    global _recording
    prev, _recording = _recording, False
    try:
        yield
    finally:
        _recording = prev


def _op(data: np.ndarray, parents, backward_fn, where: str) -> Tensor:
    _check_finite(data, where)
    if not _recording:
        return Tensor(data, _checked=True)
    return Tensor(data, parents, backward_fn, _checked=True)


# -- primitive ops ----------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _op(a.data + b.data, (a, b), back, "add")


def neg(a: Tensor) -> Tensor:
    return _op(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _op(a.data * b.data, (a, b), back, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-d operands")

    def back(g):
        return g @ b.data.T, a.data.T @ g

    return _op(a.data @ b.data, (a, b), back, "matmul")


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _op(np.asarray(out), (a,), back, "sum")


def reshape(a: Tensor, shape) -> Tensor:
    return _op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def take(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in backward."""
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _op(np.array(out), (a,), back, "take")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _op(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise NonFiniteError("log of non-positive value")
    return _op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def square(a: Tensor) -> Tensor:
    return _op(a.data**2, (a,), lambda g: (2.0 * a.data * g,), "square")


def absolute(a: Tensor) -> Tensor:
    return _op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _op(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope)
    return _op(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select elementwise; ``cond`` is a constant boolean array."""
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)

    def back(g):
        return _unbroadcast(np.where(cond, g, 0.0), a.shape), _unbroadcast(np.where(cond, 0.0, g), b.shape)

    return _op(np.where(cond, a.data, b.data), (a, b), back, "where")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _op(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def logsumexp(a: Tensor, axis: int | None = -1, keepdims: bool = False) -> Tensor:
    """Stable log-sum-exp via max subtraction.

    With ``axis=None`` the whole tensor is reduced, which for a vector is
    ``log(sum(exp(v)))``.
    """
    if a.data.size == 0 or (axis is not None and a.shape[axis] == 0):
        raise ValueError("logsumexp of an empty tensor")
    m = np.max(a.data, axis=axis, keepdims=True)
    shifted = np.exp(a.data - m)
    total = shifted.sum(axis=axis, keepdims=True)
    out_keep = m + np.log(total)
    weights = shifted / total
    out = out_keep if keepdims else (np.squeeze(out_keep, axis=axis) if axis is not None else out_keep.reshape(()))

    def back(g):
        g = np.asarray(g)
        if not keepdims:
            g = np.expand_dims(g, axis) if axis is not None else g.reshape((1,) * a.ndim)
        return (g * weights,)

    return _op(np.asarray(out), (a,), back, "logsumexp")


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    return a - logsumexp(a, axis=axis, keepdims=True)


# -- backward -----------------------------------------------------------------

def _reachable(output: Tensor) -> list[Tensor]:
    seen: dict[int, Tensor] = {}
    stack = [output]
    while stack:
        node = stack.pop()
        if node.node_id in seen:
            continue
        seen[node.node_id] = node
        stack.extend(node.parents)
    return sorted(seen.values(), key=lambda t: t.node_id, reverse=True)


def grad_backward(output: Tensor, params: Iterable[Tensor]) -> dict[int, np.ndarray]:
    """Gradients of a scalar ``output`` with respect to ``params``.

    Returns a mapping keyed by ``id(param)``; parameters that do not
    influence ``output`` get zero arrays.
    """
    if output.data.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    params = list(params)
    grads: dict[int, np.ndarray] = {output.node_id: np.ones_like(output.data)}
    for node in _reachable(output):
        g = grads.pop(node.node_id, None) if node.backward_fn is not None else grads.get(node.node_id)
        if g is None or node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            assert parent.node_id < node.node_id, "tape out of order"
            if pg is None:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
    return {id(p): np.asarray(grads.get(p.node_id, np.zeros_like(p.data)), dtype=np.float64).reshape(p.shape) for p in params}
