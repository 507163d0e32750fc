"""Dataset ingestion and partitioning.

Trees are one directory per class: ``root/<class_name>/<image files>``.
PNG and JPEG are decoded with Pillow; ``.raw`` files use a small headered
RGB format (magic ``RSFI``) so test fixtures can be bit-exact.

A class directory named ``<name>_aug`` whose base ``<name>`` also exists is
folded into ``<name>`` as augmented derivatives; the holdout split then
keeps every derivative in its source image's partition.
"""
from __future__ import annotations

import io
import struct
import warnings
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .errors import DataError, ShapeError

__all__ = [
    "LabeledSample",
    "Dataset",
    "DatasetSplit",
    "read_image",
    "write_image",
    "read_raw",
    "write_raw",
    "resize",
    "load_dataset",
    "holdout_split",
]

RAW_MAGIC = b"RSFI"
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".raw")
AUG_DIR_SUFFIX = "_aug"
AUG_STEM_MARK = "__aug"


@dataclass
class LabeledSample:
    """One image with its class index and provenance.

    ``source_path`` is the originating original image: for originals it is
    their own path, for augmented derivatives the parent's path. The
    holdout split groups on it so derivatives never straddle partitions.
    """

    pixels: np.ndarray  # u8, H x W x 3
    label: int
    path: Path
    source_path: Path
    augmented: bool = False

    def __post_init__(self):
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise DataError(f"{self.path}: expected u8 HxWx3 pixels, got "
                            f"{self.pixels.dtype} {self.pixels.shape}")


@dataclass
class Dataset:
    samples: list[LabeledSample]
    class_names: list[str]
    skipped: int = 0

    def __len__(self) -> int:
        return len(self.samples)


@dataclass
class DatasetSplit:
    train: list[int]
    validation: list[int]
    test: list[int]
    per_class: dict[str, tuple[int, int, int]]  # name -> (train, val, test)


# -- image io -----------------------------------------------------------------


def read_raw(path: Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < 12 or blob[:4] != RAW_MAGIC:
        raise DataError(f"{path}: not a raw RGB image")
    h, w = struct.unpack("<II", blob[4:12])
    need = 12 + h * w * 3
    if h < 1 or w < 1 or len(blob) != need:
        raise DataError(f"{path}: raw image payload mismatch")
    return np.frombuffer(blob[12:], dtype=np.uint8).reshape(h, w, 3).copy()


def write_raw(path: Path, pixels: np.ndarray) -> None:
    h, w, _ = pixels.shape
    with open(path, "wb") as fh:
        fh.write(RAW_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def read_image(path: Path) -> np.ndarray:
    """Decode to u8 RGB; raises DataError on anything unreadable."""
    path = Path(path)
    if path.suffix.lower() == ".raw":
        return read_raw(path)
    try:
        with Image.open(path) as img:
            return np.asarray(img.convert("RGB"), dtype=np.uint8)
    except DataError:
        raise
    except Exception as e:
        raise DataError(f"{path}: cannot decode image ({e})") from e


def write_image(path: Path, pixels: np.ndarray, fmt: str) -> Path:
    """Write u8 RGB pixels as jpg/png/raw; returns the path written."""
    path = Path(path)
    if fmt == "raw":
        path = path.with_suffix(".raw")
        write_raw(path, pixels)
    elif fmt in ("jpg", "png"):
        path = path.with_suffix("." + fmt)
        Image.fromarray(pixels, mode="RGB").save(path)
    else:
        raise DataError(f"unknown image format {fmt!r}")
    return path


# -- resize ---------------------------------------------------------------


def resize(pixels: np.ndarray, target: int) -> np.ndarray:
    """Bilinear resize to target x target, u8 in and out.

    Source coordinates follow the half-pixel-center convention
    ``src = (dst + 0.5) * scale - 0.5`` with edge clamping, so an
    identity-size resize is bitwise exact.
    """
    h, w, _ = pixels.shape
    if h < 1 or w < 1 or target < 1:
        raise DataError(f"cannot resize {h}x{w} to {target}")
    if (h, w) == (target, target):
        return pixels.copy()
    src = pixels.astype(np.float64)

    def axis_coords(n_src: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        scale = n_src / target
        x = (np.arange(target) + 0.5) * scale - 0.5
        x = np.clip(x, 0.0, n_src - 1.0)
        lo = np.floor(x).astype(np.int64)
        hi = np.minimum(lo + 1, n_src - 1)
        return lo, hi, x - lo

    ylo, yhi, ty = axis_coords(h)
    xlo, xhi, tx = axis_coords(w)
    top = src[ylo][:, xlo] * (1 - tx)[None, :, None] + src[ylo][:, xhi] * tx[None, :, None]
    bot = src[yhi][:, xlo] * (1 - tx)[None, :, None] + src[yhi][:, xhi] * tx[None, :, None]
    out = top * (1 - ty)[:, None, None] + bot * ty[:, None, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def resize_sample(sample: LabeledSample, target: int) -> LabeledSample:
    return replace(sample, pixels=resize(sample.pixels, target))


# -- loading ------------------------------------------------------------------


def load_dataset(root: Path) -> Dataset:
    """Walk the class tree into labeled samples.

    Class names sort lexicographically to indices. Undecodable files are
    skipped with a warning and counted in ``Dataset.skipped``.
    """
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"{root}: dataset root is not a directory")
    dirs = sorted(d.name for d in root.iterdir() if d.is_dir())
    if not dirs:
        raise DataError(f"{root}: no class directories found")
    # fold <name>_aug into <name> when both exist
    base_names = [d for d in dirs if not (d.endswith(AUG_DIR_SUFFIX)
                                          and d[: -len(AUG_DIR_SUFFIX)] in dirs)]
    class_index = {name: i for i, name in enumerate(base_names)}

    samples: list[LabeledSample] = []
    skipped = 0
    originals_by_stem: dict[tuple[int, str], Path] = {}
    aug_dirs: list[tuple[str, int]] = []
    for name in dirs:
        if name in class_index:
            label = class_index[name]
            folder = root / name
            files = sorted(p for p in folder.iterdir()
                           if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
            if not files:
                raise DataError(f"{folder}: class directory has no images")
            for p in files:
                try:
                    pixels = read_image(p)
                except DataError as e:
                    warnings.warn(str(e))
                    skipped += 1
                    continue
                samples.append(LabeledSample(pixels, label, p, p))
                originals_by_stem[(label, p.stem)] = p
        else:
            aug_dirs.append((name, class_index[name[: -len(AUG_DIR_SUFFIX)]]))

    for name, label in aug_dirs:
        folder = root / name
        files = sorted(p for p in folder.iterdir()
                       if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
        for p in files:
            try:
                pixels = read_image(p)
            except DataError as e:
                warnings.warn(str(e))
                skipped += 1
                continue
            stem = p.stem.split(AUG_STEM_MARK)[0]
            source = originals_by_stem.get((label, stem), p)
            samples.append(LabeledSample(pixels, label, p, source, augmented=True))

    if not samples:
        raise DataError(f"{root}: no decodable images")
    return Dataset(samples, base_names, skipped)


# -- holdout split ------------------------------------------------------------


def _take_counts(class_sizes: list[int], fraction: Fraction) -> list[int]:
    """Per-class counts for one carve-out.

    Per-class floor of fraction * size; when fraction * total is integral
    the remainder tops up the classes with the largest fractional parts
    (ties to the lower class index), so round-total splits come out as
    exact whole-number targets.
    """
    exact = [fraction * n for n in class_sizes]
    base = [int(e.numerator // e.denominator) for e in exact]
    total_exact = fraction * sum(class_sizes)
    if total_exact.denominator == 1:
        deficit = int(total_exact) - sum(base)
        order = sorted(range(len(base)), key=lambda i: (-(exact[i] - base[i]), i))
        for i in order[:deficit]:
            base[i] += 1
    return base


def holdout_split(
    dataset: Dataset | Sequence[LabeledSample],
    test_fraction: float = 0.2,
    val_fraction: float = 0.2,
    seed: int = 0,
) -> DatasetSplit:
    """Stratified, seeded, leakage-free partition into train/val/test.

    All samples sharing a ``source_path`` (an original and its augmented
    derivatives) move as one group. ``val_fraction`` applies to what
    remains after the test carve-out.
    """
    if isinstance(dataset, Dataset):
        samples = dataset.samples
        names = dataset.class_names
    else:
        samples = list(dataset)
        names = None
    if not samples:
        raise DataError("cannot split an empty dataset")
    if not (0.0 <= test_fraction < 1.0 and 0.0 <= val_fraction < 1.0):
        raise DataError("fractions must lie in [0, 1)")
    labels = sorted({s.label for s in samples})
    if names is None:
        names = [str(lbl) for lbl in labels]

    # group indices per class by source image
    per_class_groups: list[list[list[int]]] = []
    for lbl in labels:
        groups: dict[str, list[int]] = {}
        for i, s in enumerate(samples):
            if s.label == lbl:
                groups.setdefault(str(s.source_path), []).append(i)
        if len(groups) < 2:
            raise DataError(f"class {names[lbl]} has {len(groups)} source images; "
                            "need at least 2 to stratify")
        per_class_groups.append([groups[k] for k in sorted(groups)])

    class_sizes = [sum(len(g) for g in groups) for groups in per_class_groups]
    test_counts = _take_counts(class_sizes, Fraction(test_fraction).limit_denominator(10**6))
    remain_sizes = [n - t for n, t in zip(class_sizes, test_counts)]
    val_counts = _take_counts(remain_sizes, Fraction(val_fraction).limit_denominator(10**6))

    rng = np.random.default_rng(seed)
    train: list[int] = []
    validation: list[int] = []
    test: list[int] = []
    per_class: dict[str, tuple[int, int, int]] = {}
    for ci, groups in enumerate(per_class_groups):
        order = rng.permutation(len(groups))
        buckets = {"test": [], "val": [], "train": []}
        filled_test = filled_val = 0
        for gi in order:
            group = groups[gi]
            if filled_test < test_counts[ci]:
                buckets["test"].extend(group)
                filled_test += len(group)
            elif filled_val < val_counts[ci]:
                buckets["val"].extend(group)
                filled_val += len(group)
            else:
                buckets["train"].extend(group)
        train.extend(buckets["train"])
        validation.extend(buckets["val"])
        test.extend(buckets["test"])
        per_class[names[labels[ci]]] = (
            len(buckets["train"]), len(buckets["val"]), len(buckets["test"])
        )
    return DatasetSplit(sorted(train), sorted(validation), sorted(test), per_class)
