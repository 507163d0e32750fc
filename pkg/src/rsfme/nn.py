"""Layer building blocks: parameter containers plus the structured ops
(convolution, pooling, normalization, dropout) used by every branch.

Convolution and pooling are written as compositions of the tensor
primitives (pad, gather, matmul, reductions), so their gradients come from
the already-verified primitive backward rules rather than bespoke code.
"""
from __future__ import annotations

from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor

__all__ = [
    "Module",
    "ModuleList",
    "Linear",
    "Conv2d",
    "BatchNorm",
    "LayerNorm",
    "Dropout",
    "conv2d",
    "pool2d",
    "batch_norm",
    "layer_norm",
    "dropout",
    "concat_channels",
    "upsample_nearest",
    "trunc_normal",
]


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02, dtype=np.float32) -> np.ndarray:
    """Normal(0, std) redrawn until every sample lies within two sigma."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


class Module:
    """Minimal parameter container with named traversal and train/eval mode."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, (Module, ModuleList)):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(f"{prefix}{name}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name in self._buffers:
            yield prefix + name, getattr(self, name)
        for name, m in self._modules.items():
            yield from m.named_buffers(f"{prefix}{name}.")

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters then buffers, as name -> array, in definition order."""
        out = {name: p.data for name, p in self.named_parameters()}
        for name, b in self.named_buffers():
            out[name] = b
        return out

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        own = {name: p for name, p in self.named_parameters()}
        buffers = dict(self.named_buffers())
        expected = set(own) | set(buffers)
        got = set(state)
        if expected != got:
            missing = sorted(expected - got)[:3]
            extra = sorted(got - expected)[:3]
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, p in own.items():
            arr = state[name]
            if tuple(arr.shape) != p.shape:
                raise ShapeError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.astype(p.data.dtype)
            p.grad = None
        for name in buffers:
            holder, leaf = self._locate(name)
            arr = state[name]
            if tuple(arr.shape) != holder._buffers[leaf].shape:
                raise ShapeError(f"{name}: buffer shape mismatch")
            holder.register_buffer(leaf, arr.astype(holder._buffers[leaf].dtype))

    def _locate(self, dotted: str) -> tuple["Module", str]:
        parts = dotted.split(".")
        node = self
        for part in parts[:-1]:
            node = node[int(part)] if isinstance(node, ModuleList) else getattr(node, part)
        return node, parts[-1]

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def train(self) -> "Module":
        return self._set_mode(True)

    def eval(self) -> "Module":
        return self._set_mode(False)

    def _set_mode(self, flag: bool) -> "Module":
        object.__setattr__(self, "training", flag)
        for m in self._modules.values():
            m._set_mode(flag)
        return self

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList:
    """Ordered list of submodules that participates in traversal."""

    def __init__(self, modules: Sequence[Module] = ()):
        self._items = list(modules)

    def append(self, m: Module) -> None:
        self._items.append(m)

    def __iter__(self):
        return iter(self._items)

    def __len__(self):
        return len(self._items)

    def __getitem__(self, i):
        return self._items[i]

    def named_parameters(self, prefix: str = ""):
        for i, m in enumerate(self._items):
            yield from m.named_parameters(f"{prefix}{i}.")

    def named_buffers(self, prefix: str = ""):
        for i, m in enumerate(self._items):
            yield from m.named_buffers(f"{prefix}{i}.")

    def _set_mode(self, flag: bool):
        for m in self._items:
            m._set_mode(flag)
        return self


# -- structured ops ------------------------------------------------------


def _conv_out_extent(extent: int, kernel: int, stride: int, padding: int) -> int:
    out = (extent + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"window {kernel} stride {stride} pad {padding} does not fit extent {extent}"
        )
    return out


def _window_index(hp: int, wp: int, kh: int, kw: int, stride: int) -> tuple[np.ndarray, int, int]:
    """Flat gather indices for all kernel offsets x output positions.

    Layout: index[(ki*kw + kj) * L + l] addresses padded position
    (oy*stride + ki, ox*stride + kj) where l = oy*out_w + ox.
    """
    out_h = (hp - kh) // stride + 1
    out_w = (wp - kw) // stride + 1
    oy, ox = np.meshgrid(np.arange(out_h), np.arange(out_w), indexing="ij")
    base = (oy * stride * wp + ox * stride).ravel()
    offsets = (np.arange(kh)[:, None] * wp + np.arange(kw)[None, :]).ravel()
    idx = (offsets[:, None] + base[None, :]).ravel()
    return idx.astype(np.int64), out_h, out_w


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    groups: int = 1,
) -> Tensor:
    """Grouped 2-D cross-correlation over NCHW input.

    ``groups == in_channels`` with single-channel kernels gives a depthwise
    convolution; ``groups == 1`` is the dense case.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d: x {x.shape}, weight {weight.shape}")
    n, c, h, w = x.shape
    k, cg, kh, kw = weight.shape
    if c % groups or k % groups:
        raise ShapeError(f"conv2d: channels {c}->{k} not divisible by groups {groups}")
    if cg != c // groups:
        raise ShapeError(f"conv2d: weight expects {cg} channels/group, input has {c // groups}")
    out_h = _conv_out_extent(h, kh, stride, padding)
    out_w = _conv_out_extent(w, kw, stride, padding)

    xp = T.pad2d(x, (padding, padding, padding, padding)) if padding else x
    hp, wp = xp.shape[-2], xp.shape[-1]
    idx, _, _ = _window_index(hp, wp, kh, kw, stride)
    length = out_h * out_w

    cols = T.take(xp.reshape(n, c, hp * wp), idx, axis=2)
    cols = cols.reshape(n, groups, cg, kh * kw, length)
    cols = cols.reshape(n, groups, cg * kh * kw, length)
    w3 = weight.reshape(groups, k // groups, cg * kh * kw)
    out = T.matmul(w3, cols)  # [n, groups, k/groups, length]
    out = out.reshape(n, k, out_h, out_w)
    if bias is not None:
        if bias.shape != (k,):
            raise ShapeError(f"conv2d: bias {bias.shape} for {k} channels")
        out = out + bias.reshape(1, k, 1, 1)
    return out


def pool2d(x: Tensor, size: int, stride: int | None = None, mode: str = "max") -> Tensor:
    """2-D pooling over NCHW. Max ties pick the first window element in
    row-major scan order; avg spreads the gradient uniformly."""
    if mode not in ("max", "avg"):
        raise ShapeError(f"pool2d: unknown mode {mode!r}")
    if x.ndim != 4:
        raise ShapeError(f"pool2d: expected NCHW, got {x.shape}")
    stride = size if stride is None else stride
    n, c, h, w = x.shape
    out_h = _conv_out_extent(h, size, stride, 0)
    out_w = _conv_out_extent(w, size, stride, 0)
    idx, _, _ = _window_index(h, w, size, size, stride)
    length = out_h * out_w
    cols = T.take(x.reshape(n, c, h * w), idx, axis=2)
    cols = cols.reshape(n, c, size * size, length)
    pooled = cols.max_axis(2) if mode == "max" else cols.mean(axis=2)
    return pooled.reshape(n, c, out_h, out_w)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    *,
    eps: float = 1e-5,
    momentum: float = 0.1,
    training: bool = True,
    channel_axis: int = 1,
) -> Tensor:
    """Normalize per channel over every other axis.

    Training mode normalizes with the biased batch statistics and updates the
    running estimates in place: r <- (1 - momentum) * r + momentum * batch.
    Eval mode normalizes with the stored running estimates.
    """
    axis = channel_axis % x.ndim
    channels = x.shape[axis]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(f"batch_norm: gamma/beta for {channels} channels")
    reduce_axes = tuple(a for a in range(x.ndim) if a != axis)
    count = 1
    for a in reduce_axes:
        count *= x.shape[a]
    if count == 0:
        raise ShapeError("batch_norm: zero elements per channel")
    bshape = tuple(channels if a == axis else 1 for a in range(x.ndim))

    if training:
        mu = x.mean(axis=reduce_axes, keepdims=True)
        var = ((x - mu) ** 2).mean(axis=reduce_axes, keepdims=True)
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu.data.reshape(channels)
        running_var *= 1.0 - momentum
        running_var += momentum * var.data.reshape(channels)
        xh = (x - mu) * (var + eps) ** -0.5
    else:
        mu = Tensor(running_mean.reshape(bshape).astype(x.data.dtype))
        var = Tensor(running_var.reshape(bshape).astype(x.data.dtype))
        xh = (x - mu) * (var + eps) ** -0.5
    return xh * gamma.reshape(bshape) + beta.reshape(bshape)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm: gamma/beta for width {d}")
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) * (var + eps) ** -0.5 * gamma + beta


def dropout(x: Tensor, p: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity in eval mode or at p == 0."""
    if not training or p == 0.0:
        return x
    if not 0.0 <= p < 1.0:
        raise ShapeError(f"dropout: rate {p} outside [0, 1)")
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p).astype(x.data.dtype) / (1.0 - p)
    return x * Tensor(mask)


def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate NCHW maps along channels; other dims must match."""
    first = xs[0]
    for t in xs[1:]:
        if t.ndim != 4 or first.ndim != 4:
            raise ShapeError("concat_channels: expected NCHW maps")
        if t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise ShapeError(f"concat_channels: {first.shape} vs {t.shape}")
    return T.concat(list(xs), axis=1)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour spatial upsampling by an integer factor."""
    if factor < 1:
        raise ShapeError(f"upsample factor {factor}")
    if factor == 1:
        return x
    idx_h = np.repeat(np.arange(x.shape[2]), factor)
    idx_w = np.repeat(np.arange(x.shape[3]), factor)
    return T.take(T.take(x, idx_h, axis=2), idx_w, axis=3)


# -- layers ---------------------------------------------------------------


class Linear(Module):
    """y = x @ weight + bias, weight stored [in, out]."""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator,
                 bias: bool = True, dtype=np.float32):
        super().__init__()
        self.weight = Tensor(trunc_normal(rng, (in_features, out_features), dtype=dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_features, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        out = T.matmul(x, self.weight)
        if self.bias is not None:
            out = out + self.bias
        return out


class Conv2d(Module):
    def __init__(self, in_channels: int, out_channels: int, kernel: int,
                 rng: np.random.Generator, stride: int = 1, padding: int = 0,
                 groups: int = 1, bias: bool = True, dtype=np.float32):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.groups = groups
        shape = (out_channels, in_channels // groups, kernel, kernel)
        self.weight = Tensor(trunc_normal(rng, shape, dtype=dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_channels, dtype=dtype), requires_grad=True) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)


class BatchNorm(Module):
    def __init__(self, channels: int, channel_axis: int = 1, eps: float = 1e-5,
                 momentum: float = 0.1, dtype=np.float32):
        super().__init__()
        self.channel_axis = channel_axis
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.register_buffer("running_mean", np.zeros(channels, dtype=dtype))
        self.register_buffer("running_var", np.ones(channels, dtype=dtype))

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            eps=self.eps, momentum=self.momentum, training=self.training,
            channel_axis=self.channel_axis,
        )


class LayerNorm(Module):
    def __init__(self, width: int, eps: float = 1e-5, dtype=np.float32):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(width, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(width, dtype=dtype), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gamma, self.beta, self.eps)


class Dropout(Module):
    def __init__(self, p: float):
        super().__init__()
        self.p = p

    def forward(self, x: Tensor, rng: np.random.Generator | None = None) -> Tensor:
        return dropout(x, self.p, rng, self.training)
