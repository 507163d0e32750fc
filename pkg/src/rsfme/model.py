"""Fusion classifier: transformer grid map channel-concatenated with the
CNN branch maps, pooled, and classified.

Variants (config ``model.variant``):

====================  =============================
``swint``             transformer only
``swint+s``           transformer + spatial branch
``swint+r``           transformer + residual branch
``rs-fme-swint``      all three branches (default)
====================  =============================

Fusion order is fixed as (swint, residual, spatial) so checkpoints stay
layout-stable across variants.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .branches import ResidualBranch, SpatialBranch
from .errors import ShapeError
from .nn import Dropout, Linear, Module, concat_channels
from .swint import SwintBackbone
from .tensor import Tensor

__all__ = [
    "ModelGeometry",
    "TINY",
    "FULL",
    "VARIANTS",
    "HybridClassifier",
    "build_variant",
    "fuse",
    "classify",
]

VARIANTS: dict[str, tuple[str, ...]] = {
    "swint": ("swint",),
    "swint+s": ("swint", "spatial"),
    "swint+r": ("swint", "residual"),
    "rs-fme-swint": ("swint", "residual", "spatial"),
}


@dataclass(frozen=True)
class ModelGeometry:
    """Everything shape-related; two presets cover desk and full scale."""

    name: str
    image_size: int
    channels: int
    patch: int
    dim: int
    heads: int
    depth: int
    window: int
    shift: int
    residual_channels: tuple[int, ...]
    residual_strides: tuple[int, ...]
    spatial_channels: tuple[int, ...]

    @property
    def fusion_grid(self) -> int:
        return self.image_size // self.patch

    def replace_schedules(self, residual: Sequence[int] | None,
                          spatial: Sequence[int] | None) -> "ModelGeometry":
        from dataclasses import replace

        out = self
        if residual is not None:
            if len(residual) != len(self.residual_strides):
                raise ShapeError(
                    f"residual schedule needs {len(self.residual_strides)} entries"
                )
            out = replace(out, residual_channels=tuple(int(c) for c in residual))
        if spatial is not None:
            out = replace(out, spatial_channels=tuple(int(c) for c in spatial))
        return out


FULL = ModelGeometry(
    name="full",
    image_size=224,
    channels=3,
    patch=16,
    dim=768,
    heads=4,
    depth=4,
    window=7,
    shift=3,
    residual_channels=(64, 96, 160, 256),
    residual_strides=(2, 2, 1, 1),
    spatial_channels=(32, 64, 96, 128, 160),
)

TINY = ModelGeometry(
    name="tiny",
    image_size=32,
    channels=3,
    patch=8,
    dim=32,
    heads=2,
    depth=2,
    window=2,
    shift=1,
    residual_channels=(64, 96, 160, 256),
    residual_strides=(2, 1, 1, 1),
    spatial_channels=(32, 64, 96, 128),
)

GEOMETRIES = {"tiny": TINY, "full": FULL}


def fuse(maps: Sequence[Tensor]) -> Tensor:
    """Channel-concatenate branch maps already on the shared fusion grid."""
    return maps[0] if len(maps) == 1 else concat_channels(maps)


def classify(fused: Tensor, head: Linear, dropout: Dropout,
             rng: np.random.Generator | None = None) -> Tensor:
    """Global average pool -> dropout -> linear -> softmax over classes."""
    pooled = fused.mean(axis=(2, 3))
    return head(dropout(pooled, rng)).softmax(axis=-1)


class HybridClassifier(Module):
    """The assembled model; ``forward`` yields logits, ``predict`` softmax."""

    def __init__(self, geometry: ModelGeometry, branches: tuple[str, ...],
                 classes: int, dropout: float, rng: np.random.Generator,
                 dtype=np.float32):
        super().__init__()
        if classes < 2:
            raise ShapeError(f"need at least 2 classes, got {classes}")
        if not 0.0 <= dropout < 1.0:
            raise ShapeError(f"dropout rate {dropout} outside [0, 1)")
        if "swint" not in branches:
            raise ShapeError("the transformer branch is always present")
        self.geometry = geometry
        self.branch_names = branches
        self.classes = classes
        g = geometry
        self.swint = SwintBackbone(
            g.image_size, g.channels, g.patch, g.dim, g.heads, g.depth,
            g.window, g.shift, rng, dtype=dtype,
        )
        fused_channels = g.dim
        if "residual" in branches:
            self.residual = ResidualBranch(
                g.channels, g.residual_channels, g.residual_strides, rng, dtype=dtype
            )
            self._check_grid("residual", self._residual_grid(g))
            fused_channels += self.residual.out_channels
        else:
            self.residual = None
        if "spatial" in branches:
            self.spatial = SpatialBranch(
                g.channels, g.spatial_channels, g.fusion_grid, g.image_size,
                rng, dtype=dtype,
            )
            fused_channels += self.spatial.out_channels
        else:
            self.spatial = None
        self.fused_channels = fused_channels
        self.dropout = Dropout(dropout)
        self.head = Linear(fused_channels, classes, rng, dtype=dtype)
        self.dtype = dtype

    @staticmethod
    def _residual_grid(g: ModelGeometry) -> int:
        grid = g.image_size // 2 // 2  # stem conv stride 2, then 2x2 pool
        for s in g.residual_strides:
            grid //= s
        return grid

    def _check_grid(self, name: str, grid: int) -> None:
        if grid != self.geometry.fusion_grid:
            raise ShapeError(
                f"{name} branch ends on {grid}x{grid}, fusion grid is "
                f"{self.geometry.fusion_grid}"
            )

    def _as_input(self, images) -> Tensor:
        if isinstance(images, Tensor):
            return images
        return Tensor(np.asarray(images, dtype=self.dtype))

    def branch_maps(self, images) -> list[Tensor]:
        """Per-branch NCHW maps on the fusion grid, in fusion order."""
        x = self._as_input(images)
        grid_map, _ = self.swint(x)
        maps = [grid_map]
        nchw = None
        if self.residual is not None or self.spatial is not None:
            nchw = x.transpose(0, 3, 1, 2)
        if self.residual is not None:
            maps.append(self.residual(nchw))
        if self.spatial is not None:
            maps.append(self.spatial(nchw))
        return maps

    def features(self, images) -> Tensor:
        """Pooled pre-classifier feature vector [B, fused_channels]."""
        return fuse(self.branch_maps(images)).mean(axis=(2, 3))

    def forward(self, images, rng: np.random.Generator | None = None) -> Tensor:
        """Class logits [B, classes]."""
        fused = fuse(self.branch_maps(images))
        pooled = fused.mean(axis=(2, 3))
        return self.head(self.dropout(pooled, rng))

    def predict(self, images) -> Tensor:
        """Class probabilities [B, classes]; rows sum to 1."""
        return self.forward(images).softmax(axis=-1)


def build_variant(
    variant: str,
    geometry: ModelGeometry | str = TINY,
    classes: int = 5,
    dropout: float = 0.5,
    seed: int = 0,
    dtype=np.float32,
) -> HybridClassifier:
    """Assemble one of the four ablation variants."""
    if variant not in VARIANTS:
        raise ShapeError(
            f"unknown variant {variant!r}; expected one of {sorted(VARIANTS)}"
        )
    if isinstance(geometry, str):
        try:
            geometry = GEOMETRIES[geometry]
        except KeyError:
            raise ShapeError(f"unknown geometry profile {geometry!r}") from None
    rng = np.random.default_rng(seed)
    return HybridClassifier(geometry, VARIANTS[variant], classes, dropout, rng,
                            dtype=dtype)
