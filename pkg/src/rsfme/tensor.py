"""Dense tensors with reverse-mode automatic differentiation.

A ``Tensor`` wraps a numpy array plus an optional gradient and a record of
the operation that produced it. Operations build a DAG; ``backward()`` on a
scalar walks it once in reverse topological order and accumulates
``d(loss)/d(node)`` into every node that requires a gradient.

Every operation validates shapes before computing and checks its output for
NaN/Inf afterwards: a non-finite value raises ``NumericalError`` instead of
propagating silently.

Float32 is the working precision for models; float64 is used by the
finite-difference gradient checker. Non-float input is promoted to float64.
"""
from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import numpy as np
from scipy.special import erf as _erf

from .errors import NumericalError, ShapeError

__all__ = [
    "Tensor",
    "concat",
    "no_grad",
    "pad2d",
    "take",
]

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"{op}: produced a non-finite value")


def _coerce_array(data, dtype) -> np.ndarray:
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    return arr


class Tensor:
    """A numpy-backed value in the autodiff graph.

    ``data`` is treated as immutable once the tensor has been consumed by an
    operation; the optimizer mutates leaf parameters in place between steps,
    which is safe because no graph from a previous step is kept alive.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = _coerce_array(data, dtype)
        _check_finite(arr, "tensor")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn = None

    # -- basic introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype}{flag})"

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def grad_or_zero(self) -> np.ndarray:
        """Gradient array; parameters unreachable from the loss get zeros."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad

    # -- graph machinery -----------------------------------------------------

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self) -> None:
        """Reverse-mode sweep from a scalar; accumulates into ``.grad``."""
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar, got shape {self.shape}")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, Iterable[Tensor]]] = [(self, iter(self._parents))]
        seen.add(id(self))
        while stack:
            node, parents = stack[-1]
            advanced = False
            for p in parents:
                if id(p) not in seen:
                    seen.add(id(p))
                    stack.append((p, iter(p._parents)))
                    advanced = True
                    break
            if not advanced:
                stack.pop()
                order.append(node)
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)

    # -- operator sugar --------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.data.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.data.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other, self.data.dtype)
        return mul(self, power(other, -1.0))

    def __rtruediv__(self, other):
        return mul(_wrap(other, self.data.dtype), power(self, -1.0))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    # -- method aliases --------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)

    def max_axis(self, axis: int):
        return max_axis(self, axis)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def relu(self):
        return relu(self)

    def gelu(self):
        return gelu(self)

    def softmax(self, axis: int = -1):
        return softmax(self, axis)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _make(data: np.ndarray, op: str, parents: Sequence[Tensor], backward_fn) -> Tensor:
    """Create an op output, attaching the tape record when grads are on."""
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._parents = ()
    out._backward_fn = None
    out.requires_grad = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` to undo numpy broadcasting."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# -- arithmetic ---------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    a = _wrap(a, None) if not isinstance(a, Tensor) else a
    b = _wrap(b, a.data.dtype)
    try:
        data = a.data + b.data
    except ValueError as e:
        raise ShapeError(f"add: {a.shape} vs {b.shape}") from e

    def backward(g):
        a._accumulate(_unbroadcast(g, a.data.shape))
        b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(data, "add", (a, b), backward)


def neg(a: Tensor) -> Tensor:
    def backward(g):
        a._accumulate(-g)

    return _make(-a.data, "neg", (a,), backward)


def mul(a: Tensor, b) -> Tensor:
    a = _wrap(a, None) if not isinstance(a, Tensor) else a
    b = _wrap(b, a.data.dtype)
    try:
        data = a.data * b.data
    except ValueError as e:
        raise ShapeError(f"mul: {a.shape} vs {b.shape}") from e

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(data, "mul", (a, b), backward)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    with np.errstate(divide="ignore", invalid="ignore"):
        data = a.data**exponent

    def backward(g):
        a._accumulate(g * exponent * a.data ** (exponent - 1.0))

    return _make(data, "pow", (a,), backward)


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        data = np.exp(a.data)

    def backward(g):
        a._accumulate(g * data)

    return _make(data, "exp", (a,), backward)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        data = np.log(a.data)

    def backward(g):
        a._accumulate(g / a.data)

    return _make(data, "log", (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims {a.shape} vs {b.shape}")
    try:
        data = np.matmul(a.data, b.data)
    except ValueError as e:
        raise ShapeError(f"matmul: batch dims {a.shape} vs {b.shape}") from e

    def backward(g):
        ga = np.matmul(g, b.data.swapaxes(-1, -2))
        gb = np.matmul(a.data.swapaxes(-1, -2), g)
        a._accumulate(_unbroadcast(ga, a.data.shape))
        b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(data, "matmul", (a, b), backward)


# -- shape manipulation -------------------------------------------------------


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        data = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(f"reshape: {a.shape} -> {shape}") from e

    def backward(g):
        a._accumulate(g.reshape(a.data.shape))

    return _make(data, "reshape", (a,), backward)


def transpose(a: Tensor, axes: tuple[int, ...]) -> Tensor:
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"transpose: axes {axes} for rank {a.ndim}")
    data = a.data.transpose(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g):
        a._accumulate(g.transpose(inverse))

    return _make(data, "transpose", (a,), backward)


def getitem(a: Tensor, key) -> Tensor:
    """Basic indexing (ints/slices); gradient scatters back into place."""
    data = a.data[key]

    def backward(g):
        gz = np.zeros_like(a.data)
        gz[key] = g
        a._accumulate(gz)

    return _make(data, "getitem", (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    if not tensors:
        raise ShapeError("concat of an empty sequence")
    base = list(tensors[0].shape)
    axis = axis % len(base)
    for t in tensors[1:]:
        other = list(t.shape)
        if len(other) != len(base):
            raise ShapeError("concat: rank mismatch")
        if other[:axis] != base[:axis] or other[axis + 1 :] != base[axis + 1 :]:
            raise ShapeError(f"concat: {tuple(base)} vs {tuple(other)} on axis {axis}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(lo), int(hi))
            t._accumulate(g[tuple(sl)])

    return _make(data, "concat", tuple(tensors), backward)


def pad2d(a: Tensor, pad: tuple[int, int, int, int]) -> Tensor:
    """Zero-pad the last two axes by (top, bottom, left, right)."""
    pt, pb, pl, pr = (int(p) for p in pad)
    if min(pt, pb, pl, pr) < 0:
        raise ShapeError(f"pad2d: negative padding {pad}")
    width = [(0, 0)] * (a.ndim - 2) + [(pt, pb), (pl, pr)]
    data = np.pad(a.data, width)

    def backward(g):
        sl = [slice(None)] * (a.ndim - 2)
        sl += [slice(pt, g.shape[-2] - pb), slice(pl, g.shape[-1] - pr)]
        a._accumulate(g[tuple(sl)])

    return _make(data, "pad2d", (a,), backward)


def take(a: Tensor, indices: np.ndarray, axis: int) -> Tensor:
    """Gather along one axis; repeated indices sum their gradients."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("take: indices must be 1-D")
    axis = axis % a.ndim
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise ShapeError(f"take: index out of range for axis {axis} of {a.shape}")
    data = np.take(a.data, idx, axis=axis)

    def backward(g):
        gz = np.zeros_like(a.data)
        target = np.moveaxis(gz, axis, 0)
        np.add.at(target, idx, np.moveaxis(g, axis, 0))
        a._accumulate(gz)

    return _make(data, "take", (a,), backward)


# -- reductions ---------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def reduce_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    data = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            shape = list(a.data.shape)
            for ax in axes:
                shape[ax] = 1
            g = g.reshape(shape)
        a._accumulate(np.broadcast_to(g, a.data.shape).astype(a.data.dtype))

    return _make(data, "sum", (a,), backward)


def reduce_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = 1
    for ax in axes:
        count *= a.shape[ax]
    if count == 0:
        raise ShapeError("mean over zero elements")
    data = a.data.mean(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            shape = list(a.data.shape)
            for ax in axes:
                shape[ax] = 1
            g = g.reshape(shape)
        a._accumulate((np.broadcast_to(g, a.data.shape) / count).astype(a.data.dtype))

    return _make(data, "mean", (a,), backward)


def max_axis(a: Tensor, axis: int) -> Tensor:
    """Max along one axis; ties route the gradient to the first maximum."""
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise ShapeError("max over an empty axis")
    data = a.data.max(axis=axis)
    argmax = a.data.argmax(axis=axis)

    def backward(g):
        gz = np.zeros_like(a.data)
        np.put_along_axis(
            gz, np.expand_dims(argmax, axis), np.expand_dims(g, axis), axis
        )
        a._accumulate(gz)

    return _make(data, "max", (a,), backward)


# -- nonlinearities -----------------------------------------------------------


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward(g):
        a._accumulate(g * (a.data > 0))

    return _make(data, "relu", (a,), backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Tensor) -> Tensor:
    """Exact Gaussian-CDF form x * Phi(x), no tanh approximation."""
    cdf = 0.5 * (1.0 + _erf(a.data * _INV_SQRT2))
    data = (a.data * cdf).astype(a.data.dtype)

    def backward(g):
        pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
        a._accumulate(g * (cdf + a.data * pdf))

    return _make(data, "gelu", (a,), backward)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stable softmax along ``axis``."""
    axis = axis % a.ndim
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        inner = (g * data).sum(axis=axis, keepdims=True)
        a._accumulate(data * (g - inner))

    return _make(data, "softmax", (a,), backward)
