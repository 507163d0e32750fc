"""Auxiliary CNN branches that run on the image in parallel with the
transformer: a residual-learning stack and a spatial-exploitation stack.

Both end on the common fusion grid so their maps can be concatenated with
the transformer's token grid channel-wise.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import ShapeError
from .nn import BatchNorm, Conv2d, Module, ModuleList, pool2d, upsample_nearest
from .tensor import Tensor

__all__ = ["ResidualBlock", "ResidualBranch", "SpatialBlock", "SpatialBranch"]


class ResidualBlock(Module):
    """y = relu(F(x) + skip): F is conv3x3-bn-relu-conv3x3-bn; the skip is
    the identity when geometry allows, otherwise a strided 1x1 projection."""

    def __init__(self, in_channels: int, out_channels: int, stride: int,
                 rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.conv_p = Conv2d(in_channels, out_channels, 3, rng, stride=stride,
                             padding=1, dtype=dtype)
        self.norm_p = BatchNorm(out_channels, dtype=dtype)
        self.conv_q = Conv2d(out_channels, out_channels, 3, rng, padding=1, dtype=dtype)
        self.norm_q = BatchNorm(out_channels, dtype=dtype)
        if stride != 1 or in_channels != out_channels:
            self.projection = Conv2d(in_channels, out_channels, 1, rng,
                                     stride=stride, bias=False, dtype=dtype)
        else:
            self.projection = None

    def forward(self, x: Tensor) -> Tensor:
        y = self.norm_q(self.conv_q(self.norm_p(self.conv_p(x)).relu()))
        skip = x if self.projection is None else self.projection(x)
        return (y + skip).relu()


class ResidualBranch(Module):
    """Stem (conv3x3 stride 2, bn, relu, 2x2 max-pool) plus four residual
    blocks; stride placement is set by ``strides`` so the branch lands on
    the fusion grid."""

    STEM_CHANNELS = 64

    def __init__(self, in_channels: int, channels: Sequence[int],
                 strides: Sequence[int], rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        if len(channels) != len(strides):
            raise ShapeError(f"{len(channels)} channels vs {len(strides)} strides")
        self.stem = Conv2d(in_channels, self.STEM_CHANNELS, 3, rng, stride=2,
                           padding=1, dtype=dtype)
        self.stem_norm = BatchNorm(self.STEM_CHANNELS, dtype=dtype)
        blocks = []
        prev = self.STEM_CHANNELS
        for ch, stride in zip(channels, strides):
            blocks.append(ResidualBlock(prev, ch, stride, rng, dtype=dtype))
            prev = ch
        self.blocks = ModuleList(blocks)
        self.out_channels = prev

    def forward(self, x: Tensor) -> Tensor:
        """NCHW image -> [B, channels[-1], grid, grid]."""
        y = self.stem_norm(self.stem(x)).relu()
        y = pool2d(y, 2, 2, "max")
        for block in self.blocks:
            y = block(y)
        return y


class SpatialBlock(Module):
    """conv3x3(pad 1) -> bn -> relu -> 2x2 pooling, halving the extent.

    The final block of a branch pools with max and average in parallel and
    merges them by elementwise mean; earlier blocks use max alone.
    """

    def __init__(self, in_channels: int, out_channels: int,
                 rng: np.random.Generator, merge_pools: bool = False, dtype=np.float32):
        super().__init__()
        self.conv = Conv2d(in_channels, out_channels, 3, rng, padding=1, dtype=dtype)
        self.norm = BatchNorm(out_channels, dtype=dtype)
        self.merge_pools = merge_pools

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] % 2 or x.shape[-2] % 2:
            raise ShapeError(f"spatial block needs even extents, got {x.shape}")
        y = self.norm(self.conv(x)).relu()
        pooled = pool2d(y, 2, 2, "max")
        if self.merge_pools:
            pooled = (pooled + pool2d(y, 2, 2, "avg")) * 0.5
        return pooled


class SpatialBranch(Module):
    """Stacked spatial blocks, then nearest-neighbour upsampling onto the
    fusion grid (each block halves, so the stack usually ends below it)."""

    def __init__(self, in_channels: int, channels: Sequence[int], fusion_grid: int,
                 image_size: int, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        final_grid = image_size // (2 ** len(channels))
        if final_grid * (2 ** len(channels)) != image_size or final_grid < 1:
            raise ShapeError(
                f"{len(channels)} halvings do not divide image size {image_size}"
            )
        if fusion_grid % final_grid:
            raise ShapeError(f"cannot upsample {final_grid} onto grid {fusion_grid}")
        self.upsample_factor = fusion_grid // final_grid
        blocks = []
        prev = in_channels
        for i, ch in enumerate(channels):
            blocks.append(SpatialBlock(prev, ch, rng,
                                       merge_pools=(i == len(channels) - 1),
                                       dtype=dtype))
            prev = ch
        self.blocks = ModuleList(blocks)
        self.out_channels = prev

    def forward(self, x: Tensor) -> Tensor:
        """NCHW image -> [B, channels[-1], fusion_grid, fusion_grid]."""
        y = x
        for block in self.blocks:
            y = block(y)
        return upsample_nearest(y, self.upsample_factor)
