"""Windowed-attention transformer backbone over image patches.

Tokens are patch embeddings plus one class token. Attention runs inside
fixed square windows of the token grid; alternating blocks shift the grid
by a cyclic roll before partitioning so information crosses window borders.
The class token joins every window and its per-window outputs are averaged.

Each block is pre-norm: attention with a residual connection, then an
inverted-bottleneck feed-forward (pointwise expand, GELU, batch norm,
depthwise 3x3 over the token grid with an inner residual, pointwise
project, batch norm) with a second residual connection.
"""
from __future__ import annotations

import numpy as np

from . import nn
from . import tensor as T
from .errors import ShapeError
from .nn import BatchNorm, Conv2d, LayerNorm, Linear, Module, ModuleList, trunc_normal
from .tensor import Tensor

__all__ = [
    "PatchEmbed",
    "WindowAttention",
    "InvertedBottleneck",
    "TransformerBlock",
    "SwintBackbone",
    "scaled_attention",
    "window_permutation",
    "window_partition",
    "window_unpartition",
]


def scaled_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) v over the last two axes."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"attention: key width {k.shape} vs query {q.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"attention: {k.shape[-2]} keys vs {v.shape[-2]} values")
    scale = 1.0 / np.sqrt(q.shape[-1])
    scores = T.matmul(q, _swap_last(k)) * scale
    return T.matmul(scores.softmax(axis=-1), v)


def _swap_last(t: Tensor) -> Tensor:
    axes = list(range(t.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return t.transpose(axes)


def window_permutation(grid: int, window: int, shift: int) -> tuple[np.ndarray, np.ndarray]:
    """Token order that groups each (rolled) window contiguously.

    Returns ``(perm, inv)`` with ``perm[j]`` the source grid-token index for
    position ``j`` and ``inv`` its exact inverse. A nonzero shift rolls the
    grid up-left cyclically before tiling, the roll used by shifted blocks.
    """
    if grid % window:
        raise ShapeError(f"token grid {grid} not tileable by window {window}")
    if not 0 <= shift < window:
        raise ShapeError(f"shift {shift} outside [0, window {window})")
    coords = np.arange(grid * grid, dtype=np.int64).reshape(grid, grid)
    if shift:
        coords = np.roll(coords, (-shift, -shift), axis=(0, 1))
    tiles = grid // window
    perm = (
        coords.reshape(tiles, window, tiles, window)
        .transpose(0, 2, 1, 3)
        .reshape(-1)
    )
    return perm, np.argsort(perm)


def window_partition(tokens: Tensor, window: int, shift: int = 0) -> Tensor:
    """[T, D] grid tokens -> [n_windows, window*window, D]."""
    t, d = tokens.shape
    grid = int(np.sqrt(t))
    if grid * grid != t:
        raise ShapeError(f"token count {t} is not a square grid")
    perm, _ = window_permutation(grid, window, shift)
    n = (grid // window) ** 2
    return T.take(tokens, perm, axis=0).reshape(n, window * window, d)


def window_unpartition(windows: Tensor, window: int, shift: int = 0) -> Tensor:
    """Exact inverse of :func:`window_partition`."""
    n, ww, d = windows.shape
    grid = int(np.sqrt(n)) * window
    _, inv = window_permutation(grid, window, shift)
    return T.take(windows.reshape(n * ww, d), inv, axis=0)


class PatchEmbed(Module):
    """Non-overlapping patch projection plus class token and positions."""

    def __init__(self, image_size: int, channels: int, patch: int, dim: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if image_size % patch:
            raise ShapeError(f"image {image_size} not divisible by patch {patch}")
        self.image_size = image_size
        self.channels = channels
        self.patch = patch
        self.dim = dim
        self.grid = image_size // patch
        self.tokens = self.grid * self.grid
        width = patch * patch * channels
        self.projection = Tensor(trunc_normal(rng, (width, dim), dtype=dtype),
                                 requires_grad=True)
        self.class_token = Tensor(trunc_normal(rng, (dim,), dtype=dtype),
                                  requires_grad=True)
        self.positions = Tensor(np.zeros((self.tokens + 1, dim), dtype=dtype),
                                requires_grad=True)

    def forward(self, images: Tensor) -> Tensor:
        """[B, H, W, C] -> [B, tokens + 1, dim], class token first."""
        b, h, w, c = images.shape
        if (h, w, c) != (self.image_size, self.image_size, self.channels):
            raise ShapeError(
                f"expected {self.image_size}x{self.image_size}x{self.channels} input, got {h}x{w}x{c}"
            )
        g, p = self.grid, self.patch
        x = images.reshape(b, g, p, g, p, c)
        x = x.transpose(0, 1, 3, 2, 4, 5)
        x = x.reshape(b, self.tokens, p * p * c)
        x = T.matmul(x, self.projection)
        cls = self.class_token.reshape(1, 1, self.dim)
        cls = T.take(cls, np.zeros(b, dtype=np.int64), axis=0)
        return T.concat([cls, x], axis=1) + self.positions


class WindowAttention(Module):
    """Multi-head attention restricted to grid windows.

    The class token is appended to every window's sequence; its outputs are
    averaged across windows. Shifted blocks roll the grid before tiling and
    unroll afterwards, so partition and merge stay exact inverses.
    """

    def __init__(self, dim: int, heads: int, grid: int, window: int, shift: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if dim % heads:
            raise ShapeError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.grid = grid
        self.window = window
        self.shift = shift
        perm, inv = window_permutation(grid, window, shift)
        self._perm, self._inv = perm, inv
        self.n_windows = (grid // window) ** 2
        self.wq = Linear(dim, dim, rng, dtype=dtype)
        self.wk = Linear(dim, dim, rng, dtype=dtype)
        self.wv = Linear(dim, dim, rng, dtype=dtype)
        self.wo = Linear(dim, dim, rng, dtype=dtype)

    def _heads(self, x: Tensor, b: int, t: int) -> Tensor:
        return x.reshape(b, t, self.heads, self.head_dim).transpose(0, 2, 1, 3)

    def _windows(self, x: Tensor, b: int) -> tuple[Tensor, Tensor]:
        """Split head-major tokens into per-window sequences, class first."""
        cls = x[:, :, :1, :]
        grid_tokens = T.take(x, self._perm + 1, axis=2)
        ww = self.window * self.window
        grid_tokens = grid_tokens.reshape(b, self.heads, self.n_windows, ww, self.head_dim)
        cls = cls.reshape(b, self.heads, 1, 1, self.head_dim)
        cls = T.take(cls, np.zeros(self.n_windows, dtype=np.int64), axis=2)
        return T.concat([cls, grid_tokens], axis=3), cls

    def forward(self, x: Tensor) -> Tensor:
        b, t, d = x.shape
        if t != self.grid * self.grid + 1:
            raise ShapeError(f"expected {self.grid * self.grid + 1} tokens, got {t}")
        q = self._heads(self.wq(x), b, t)
        k = self._heads(self.wk(x), b, t)
        v = self._heads(self.wv(x), b, t)
        qw, _ = self._windows(q, b)
        kw, _ = self._windows(k, b)
        vw, _ = self._windows(v, b)
        out = scaled_attention(qw, kw, vw)  # [b, heads, nW, 1 + w*w, head_dim]
        cls_out = out[:, :, :, :1, :].mean(axis=2)  # average over windows
        ww = self.window * self.window
        grid_out = out[:, :, :, 1:, :].reshape(b, self.heads, self.n_windows * ww, self.head_dim)
        grid_out = T.take(grid_out, self._inv, axis=2)
        merged = T.concat([cls_out, grid_out], axis=2)
        merged = merged.transpose(0, 2, 1, 3).reshape(b, t, d)
        return self.wo(merged)


class InvertedBottleneck(Module):
    """Feed-forward stage: expand 4x, GELU, batch norm, depthwise 3x3 over
    the token grid with an inner residual (class token passes through),
    project back, batch norm. No outer residual here; the block adds it."""

    def __init__(self, dim: int, grid: int, rng: np.random.Generator,
                 expansion: int = 4, dtype=np.float32):
        super().__init__()
        self.dim = dim
        self.grid = grid
        self.hidden = expansion * dim
        self.expand = Linear(dim, self.hidden, rng, dtype=dtype)
        self.norm_hidden = BatchNorm(self.hidden, channel_axis=-1, dtype=dtype)
        self.depthwise = Conv2d(self.hidden, self.hidden, 3, rng, padding=1,
                                groups=self.hidden, dtype=dtype)
        self.project = Linear(self.hidden, dim, rng, dtype=dtype)
        self.norm_out = BatchNorm(dim, channel_axis=-1, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        b, t, _ = x.shape
        g = self.grid
        if t != g * g + 1:
            raise ShapeError(f"expected {g * g + 1} tokens, got {t}")
        h = self.norm_hidden(self.expand(x).gelu())
        cls, grid_tokens = h[:, :1, :], h[:, 1:, :]
        fmap = grid_tokens.transpose(0, 2, 1).reshape(b, self.hidden, g, g)
        fmap = self.depthwise(fmap) + fmap
        grid_tokens = fmap.reshape(b, self.hidden, g * g).transpose(0, 2, 1)
        h = T.concat([cls, grid_tokens], axis=1)
        return self.norm_out(self.project(h))


class TransformerBlock(Module):
    def __init__(self, dim: int, heads: int, grid: int, window: int, shift: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.norm_attn = LayerNorm(dim, dtype=dtype)
        self.attn = WindowAttention(dim, heads, grid, window, shift, rng, dtype=dtype)
        self.norm_ffn = LayerNorm(dim, dtype=dtype)
        self.ffn = InvertedBottleneck(dim, grid, rng, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        x = self.attn(self.norm_attn(x)) + x
        return self.ffn(self.norm_ffn(x)) + x


class SwintBackbone(Module):
    """Patch embedding plus a stack of windowed transformer blocks.

    Blocks alternate unshifted / shifted partitions starting unshifted.
    Returns the grid tokens as an NCHW feature map along with the class
    token vector.
    """

    def __init__(self, image_size: int, channels: int, patch: int, dim: int,
                 heads: int, depth: int, window: int, shift: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.embed = PatchEmbed(image_size, channels, patch, dim, rng, dtype=dtype)
        grid = self.embed.grid
        self.grid = grid
        self.dim = dim
        blocks = []
        for i in range(depth):
            block_shift = shift if i % 2 else 0
            blocks.append(TransformerBlock(dim, heads, grid, window, block_shift,
                                           rng, dtype=dtype))
        self.blocks = ModuleList(blocks)

    def forward(self, images: Tensor) -> tuple[Tensor, Tensor]:
        x = self.embed(images)
        for block in self.blocks:
            x = block(x)
        b = x.shape[0]
        cls = x[:, 0, :]
        grid_map = x[:, 1:, :].transpose(0, 2, 1).reshape(b, self.dim, self.grid, self.grid)
        return grid_map, cls
