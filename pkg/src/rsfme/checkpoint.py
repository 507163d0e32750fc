"""Binary model checkpoints.

Layout, all little-endian:

* magic ``RSFM``, u32 format version (currently 1)
* u32 tensor count, then per tensor: u32 name length, UTF-8 name,
  u32 rank, u64 per dimension, raw float32 values
* optimizer section: u32 epoch, f64 learning rate, f64 momentum,
  u32 velocity count, then velocity tensors in the same record format
* u64 config length, UTF-8 config snapshot (``key = value`` lines)

Values are stored as float32, matching training precision, so a
save/load round trip is bitwise exact.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError

__all__ = ["OptimizerSnapshot", "Checkpoint", "save_checkpoint", "load_checkpoint"]

MAGIC = b"RSFM"
VERSION = 1


@dataclass
class OptimizerSnapshot:
    epoch: int = 0
    lr: float = 0.0
    momentum: float = 0.0
    velocities: dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class Checkpoint:
    arrays: dict[str, np.ndarray]
    optimizer: OptimizerSnapshot
    config_text: str


def _write_tensor(fh, name: str, array: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", array.ndim))
    fh.write(struct.pack(f"<{array.ndim}Q", *array.shape))
    fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())


class _Reader:
    def __init__(self, blob: bytes, path: Path):
        self.blob = blob
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def f64(self) -> float:
        return struct.unpack("<d", self.take(8))[0]

    def tensor(self) -> tuple[str, np.ndarray]:
        name = self.take(self.u32()).decode("utf-8")
        rank = self.u32()
        if rank > 8:
            raise CheckpointError(f"{self.path}: implausible tensor rank {rank}")
        shape = struct.unpack(f"<{rank}Q", self.take(8 * rank))
        count = 1
        for d in shape:
            count *= d
        data = np.frombuffer(self.take(4 * count), dtype="<f4").reshape(shape)
        return name, data.copy()


def save_checkpoint(path: Path, arrays: dict[str, np.ndarray],
                    optimizer: OptimizerSnapshot, config_text: str) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(arrays)))
        for name in sorted(arrays):
            _write_tensor(fh, name, arrays[name])
        fh.write(struct.pack("<I", optimizer.epoch))
        fh.write(struct.pack("<d", optimizer.lr))
        fh.write(struct.pack("<d", optimizer.momentum))
        fh.write(struct.pack("<I", len(optimizer.velocities)))
        for name in sorted(optimizer.velocities):
            _write_tensor(fh, name, optimizer.velocities[name])
        encoded = config_text.encode("utf-8")
        fh.write(struct.pack("<Q", len(encoded)))
        fh.write(encoded)


def load_checkpoint(path: Path) -> Checkpoint:
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: cannot read checkpoint ({e})") from e
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    arrays = dict(r.tensor() for _ in range(r.u32()))
    optimizer = OptimizerSnapshot(epoch=r.u32(), lr=r.f64(), momentum=r.f64())
    optimizer.velocities = dict(r.tensor() for _ in range(r.u32()))
    config_len = struct.unpack("<Q", r.take(8))[0]
    config_text = r.take(config_len).decode("utf-8")
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} trailing bytes")
    return Checkpoint(arrays, optimizer, config_text)
