"""Random affine augmentation for labeled image samples.

Each augmented image applies, about the image center and in this order:
reflection, scaling, rotation, x-axis shear, translation. Parameters are
drawn uniformly from fixed ranges; warping is inverse-mapped bilinear
with edge replication so output size equals input size.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .data import LabeledSample, write_image
from .errors import DataError

__all__ = [
    "AugmentParams",
    "sample_params",
    "affine_matrix",
    "warp",
    "augment_one",
    "augment_dataset",
]

ROTATION_RANGE = (-30.0, 30.0)   # degrees
SHEAR_RANGE = (0.0, 30.0)        # degrees, x-axis
SCALE_RANGE = (1.0, 1.5)
TRANSLATION_RANGE = (-5.0, 5.0)  # pixels, each axis
BATCH = 16
MAX_ROUNDS = 20


@dataclass(frozen=True)
class AugmentParams:
    rotation_deg: float
    shear_deg: float
    scale: float
    translate_x: float
    translate_y: float
    reflect_x: int  # +1 keep, -1 mirror horizontally
    reflect_y: int

    def __post_init__(self):
        lo, hi = ROTATION_RANGE
        if not lo <= self.rotation_deg <= hi:
            raise DataError(f"rotation {self.rotation_deg} outside [{lo}, {hi}]")
        lo, hi = SHEAR_RANGE
        if not lo <= self.shear_deg <= hi:
            raise DataError(f"shear {self.shear_deg} outside [{lo}, {hi}]")
        lo, hi = SCALE_RANGE
        if not lo <= self.scale <= hi:
            raise DataError(f"scale {self.scale} outside [{lo}, {hi}]")
        lo, hi = TRANSLATION_RANGE
        for t in (self.translate_x, self.translate_y):
            if not lo <= t <= hi:
                raise DataError(f"translation {t} outside [{lo}, {hi}]")
        if self.reflect_x not in (1, -1) or self.reflect_y not in (1, -1):
            raise DataError("reflections must be +1 or -1")


IDENTITY = AugmentParams(0.0, 0.0, 1.0, 0.0, 0.0, 1, 1)


def sample_params(rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(
        rotation_deg=rng.uniform(*ROTATION_RANGE),
        shear_deg=rng.uniform(*SHEAR_RANGE),
        scale=rng.uniform(*SCALE_RANGE),
        translate_x=rng.uniform(*TRANSLATION_RANGE),
        translate_y=rng.uniform(*TRANSLATION_RANGE),
        reflect_x=1 if rng.random() < 0.5 else -1,
        reflect_y=1 if rng.random() < 0.5 else -1,
    )


def affine_matrix(params: AugmentParams) -> np.ndarray:
    """3x3 forward map in (x, y, 1) coordinates about the origin.

    Composition order is reflection, then scale, rotation, shear, and
    translation last, i.e. M = T @ H @ R @ S @ F.
    """
    f = np.diag([float(params.reflect_x), float(params.reflect_y), 1.0])
    s = np.diag([params.scale, params.scale, 1.0])
    a = math.radians(params.rotation_deg)
    r = np.array([[math.cos(a), -math.sin(a), 0.0],
                  [math.sin(a), math.cos(a), 0.0],
                  [0.0, 0.0, 1.0]])
    h = np.array([[1.0, math.tan(math.radians(params.shear_deg)), 0.0],
                  [0.0, 1.0, 0.0],
                  [0.0, 0.0, 1.0]])
    t = np.array([[1.0, 0.0, params.translate_x],
                  [0.0, 1.0, params.translate_y],
                  [0.0, 0.0, 1.0]])
    return t @ h @ r @ s @ f


def warp(pixels: np.ndarray, params: AugmentParams) -> np.ndarray:
    """Apply the affine map about the image center.

    Output pixels pull from inverse-mapped source coordinates with
    bilinear interpolation; coordinates are clamped, replicating edges.
    """
    h, w, _ = pixels.shape
    inv = np.linalg.inv(affine_matrix(params))
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    ys, xs = np.mgrid[0:h, 0:w]
    dx = xs - cx
    dy = ys - cy
    sx = inv[0, 0] * dx + inv[0, 1] * dy + inv[0, 2] + cx
    sy = inv[1, 0] * dx + inv[1, 1] * dy + inv[1, 2] + cy
    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    tx = (sx - x0)[..., None]
    ty = (sy - y0)[..., None]
    src = pixels.astype(np.float64)
    top = src[y0, x0] * (1 - tx) + src[y0, x1] * tx
    bot = src[y1, x0] * (1 - tx) + src[y1, x1] * tx
    out = top * (1 - ty) + bot * ty
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def augment_one(sample: LabeledSample, params: AugmentParams) -> LabeledSample:
    """Warped copy keeping the label, size, and source lineage."""
    return replace(sample, pixels=warp(sample.pixels, params), augmented=True)


def _sub_rng(seed: int, source_index: int, round_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, source_index, round_index]))


def augment_dataset(
    samples: list[LabeledSample],
    class_names: list[str],
    out_dir: Path,
    rounds: int = 1,
    seed: int = 0,
    fmt: str = "png",
) -> list[LabeledSample]:
    """Write ``rounds`` augmented copies of every original sample.

    Files land in ``out_dir/<class>_aug/<stem>__aug_r<NN>.<fmt>``; each
    copy's parameters come from a generator keyed on (seed, sample index,
    round), so reruns are bitwise identical and insertion order is
    irrelevant. Work proceeds in batches of 16 source images.
    """
    if not 1 <= rounds <= MAX_ROUNDS:
        raise DataError(f"rounds must lie in 1..{MAX_ROUNDS}, got {rounds}")
    out_dir = Path(out_dir)
    originals = [(i, s) for i, s in enumerate(samples) if not s.augmented]
    produced: list[LabeledSample] = []
    for start in range(0, len(originals), BATCH):
        for i, sample in originals[start:start + BATCH]:
            folder = out_dir / f"{class_names[sample.label]}_aug"
            folder.mkdir(parents=True, exist_ok=True)
            for r in range(1, rounds + 1):
                params = sample_params(_sub_rng(seed, i, r))
                new = augment_one(sample, params)
                name = f"{sample.path.stem}__aug_r{r:02d}"
                path = write_image(folder / name, new.pixels, fmt)
                produced.append(replace(new, path=path, source_path=sample.path))
    return produced
