"""Training loop: cross-entropy objective, SGD with momentum, a stepped
learning-rate schedule, CSV logging, and resumable checkpoints.

Every source of randomness inside an epoch is derived from
``SeedSequence([seed, epoch, ...])``, so resuming from a checkpoint at
epoch k replays epochs k+1.. exactly as an uninterrupted run would.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import config as cfg
from .checkpoint import OptimizerSnapshot, load_checkpoint, save_checkpoint
from .errors import ConfigError, DivergenceError, NumericalError, ShapeError
from .model import GEOMETRIES, build_variant
from .tensor import Tensor, no_grad

__all__ = [
    "cross_entropy",
    "SgdMomentum",
    "default_breakpoints",
    "lr_for_epoch",
    "TrainProfile",
    "PROFILES",
    "samples_to_arrays",
    "evaluate",
    "predict_scores",
    "train",
    "resume",
    "model_from_snapshot",
]

LR_DECAY = 0.1
LOG_HEADER = "epoch,split,loss,accuracy,lr"


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood straight from logits.

    Uses the log-sum-exp form with a detached per-row shift, so the
    gradient is exactly (softmax - onehot) / batch.
    """
    if logits.ndim != 2:
        raise ShapeError(f"logits must be [batch, classes], got {logits.shape}")
    labels = np.asarray(labels)
    b, c = logits.shape
    if labels.shape != (b,):
        raise ShapeError(f"labels {labels.shape} do not match batch {b}")
    if labels.min() < 0 or labels.max() >= c:
        raise ShapeError(f"labels outside 0..{c - 1}")
    shift = logits.data.max(axis=1, keepdims=True)
    z = logits - Tensor(shift)
    lse = z.exp().sum(axis=1).log()
    onehot = np.zeros((b, c), dtype=logits.data.dtype)
    onehot[np.arange(b), labels] = 1.0
    true_logit = (z * Tensor(onehot)).sum(axis=1)
    return (lse - true_logit).mean()


class SgdMomentum:
    """v <- momentum * v + grad; p <- p - lr * v."""

    def __init__(self, lr: float, momentum: float = 0.0):
        if lr <= 0.0:
            raise ConfigError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ConfigError(f"momentum {momentum} outside [0, 1)")
        self.lr = lr
        self.momentum = momentum
        self.velocities: dict[str, np.ndarray] = {}

    def step(self, named_params) -> None:
        for name, p in named_params:
            g = p.grad_or_zero()
            v = self.velocities.get(name)
            if v is None:
                v = np.zeros_like(p.data)
                self.velocities[name] = v
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def snapshot(self, epoch: int) -> OptimizerSnapshot:
        velocities = {k: v.copy() for k, v in self.velocities.items()}
        return OptimizerSnapshot(epoch, self.lr, self.momentum, velocities)

    def restore(self, snap: OptimizerSnapshot) -> None:
        self.lr = snap.lr
        self.momentum = snap.momentum
        self.velocities = {k: v.astype(np.float32).copy()
                           for k, v in snap.velocities.items()}


def default_breakpoints(total_epochs: int) -> tuple[int, int]:
    """Decay epochs at 60% and 85% of the run, rounded half up."""
    return (int(math.floor(0.60 * total_epochs + 0.5)),
            int(math.floor(0.85 * total_epochs + 0.5)))


def lr_for_epoch(base_lr: float, epoch: int,
                 breakpoints: tuple[int, ...]) -> float:
    passed = sum(1 for b in breakpoints if epoch >= b)
    return base_lr * (LR_DECAY ** passed)


@dataclass(frozen=True)
class TrainProfile:
    name: str
    lr: float
    momentum: float
    epochs: int
    batch_size: int


PROFILES = {
    "table2": TrainProfile("table2", 1e-3, 0.90, 10, 16),
    "sec43": TrainProfile("sec43", 1e-4, 0.95, 50, 16),
}
DEFAULT_PROFILE = "table2"


def samples_to_arrays(samples, image_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Stack labeled samples as float32 NHWC in [0, 1] plus label vector."""
    from .data import resize

    xs = np.stack([resize(s.pixels, image_size) for s in samples])
    ys = np.array([s.label for s in samples], dtype=np.int64)
    return xs.astype(np.float32) / 255.0, ys


@dataclass
class LogRow:
    epoch: int
    split: str
    loss: float
    accuracy: float
    lr: float

    def line(self) -> str:
        return (f"{self.epoch},{self.split},{self.loss:.6f},"
                f"{self.accuracy:.6f},{self.lr:.6g}")


@dataclass
class TrainResult:
    rows: list[LogRow]
    best_epoch: int
    best_accuracy: float
    log_path: Path | None
    last_path: Path | None
    best_path: Path | None
    model: object = field(repr=False, default=None)


def _batches(n: int, batch_size: int, order: np.ndarray | None = None):
    idx = np.arange(n) if order is None else order
    for start in range(0, n, batch_size):
        yield idx[start:start + batch_size]


def evaluate(model, x: np.ndarray, y: np.ndarray,
             batch_size: int = 16) -> tuple[float, float, np.ndarray]:
    """Mean loss, accuracy, and predicted labels, in inference mode."""
    was_training = model.training
    model.eval()
    loss_sum = 0.0
    hits = 0
    predicted = np.empty(y.shape[0], dtype=np.int64)
    with no_grad():
        for idx in _batches(y.shape[0], batch_size):
            logits = model.forward(x[idx])
            loss = cross_entropy(logits, y[idx])
            loss_sum += float(loss.data) * idx.size
            guess = np.argmax(logits.data, axis=1)
            predicted[idx] = guess
            hits += int((guess == y[idx]).sum())
    if was_training:
        model.train()
    return loss_sum / y.shape[0], hits / y.shape[0], predicted


def predict_scores(model, x: np.ndarray, batch_size: int = 16) -> np.ndarray:
    """Softmax probabilities [n, classes], in inference mode."""
    model.eval()
    parts = []
    with no_grad():
        for idx in _batches(x.shape[0], batch_size):
            parts.append(model.predict(x[idx]).data)
    return np.concatenate(parts, axis=0)


def train(
    model,
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray | None = None,
    val_y: np.ndarray | None = None,
    profile: TrainProfile = PROFILES[DEFAULT_PROFILE],
    seed: int = 0,
    out_dir: Path | None = None,
    config_snapshot: str = "",
    start_epoch: int = 1,
    stop_after: int | None = None,
    optimizer: SgdMomentum | None = None,
    log_rows: list[LogRow] | None = None,
) -> TrainResult:
    """Run epochs ``start_epoch..stop_after`` of the profile's schedule.

    Writes ``train_log.csv``, ``last.ckpt`` (every epoch) and
    ``best.ckpt`` (on validation-accuracy improvement) under ``out_dir``
    when given. ``stop_after`` trims the run without changing the
    learning-rate schedule, which always spans ``profile.epochs``.
    """
    if train_y.shape[0] == 0:
        raise ShapeError("no training samples")
    last_epoch = profile.epochs if stop_after is None else min(stop_after, profile.epochs)
    breakpoints = default_breakpoints(profile.epochs)
    optimizer = optimizer or SgdMomentum(profile.lr, profile.momentum)
    rows: list[LogRow] = list(log_rows or [])
    best_epoch = 0
    best_accuracy = -1.0
    for row in rows:  # picked up from a resumed log
        if row.split == "val" and row.accuracy > best_accuracy:
            best_epoch, best_accuracy = row.epoch, row.accuracy

    log_path = last_path = best_path = None
    log_fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.csv"
        last_path = out_dir / "last.ckpt"
        best_path = out_dir / "best.ckpt"
        fresh = start_epoch == 1
        log_fh = open(log_path, "w" if fresh else "a")
        if fresh:
            log_fh.write(LOG_HEADER + "\n")

    def emit(row: LogRow) -> None:
        rows.append(row)
        if log_fh is not None:
            log_fh.write(row.line() + "\n")
            log_fh.flush()

    try:
        for epoch in range(start_epoch, last_epoch + 1):
            optimizer.lr = lr_for_epoch(profile.lr, epoch, breakpoints)
            model.train()
            order = np.random.default_rng(
                np.random.SeedSequence([seed, epoch])).permutation(train_y.shape[0])
            loss_sum = 0.0
            hits = 0
            for step, idx in enumerate(_batches(train_y.shape[0],
                                                profile.batch_size, order)):
                drop_rng = np.random.default_rng(
                    np.random.SeedSequence([seed, epoch, step]))
                model.zero_grad()
                try:
                    logits = model.forward(train_x[idx], rng=drop_rng)
                    loss = cross_entropy(logits, train_y[idx])
                    if not math.isfinite(float(loss.data)):
                        raise NumericalError("loss is not finite")
                    loss.backward()
                except NumericalError as e:
                    raise DivergenceError(
                        f"training diverged at epoch {epoch} step {step}: {e}"
                    ) from e
                optimizer.step(model.named_parameters())
                loss_sum += float(loss.data) * idx.size
                hits += int((np.argmax(logits.data, axis=1) == train_y[idx]).sum())
            emit(LogRow(epoch, "train", loss_sum / train_y.shape[0],
                        hits / train_y.shape[0], optimizer.lr))

            monitored = None
            if val_x is not None and val_y is not None and val_y.shape[0]:
                val_loss, val_acc, _ = evaluate(model, val_x, val_y,
                                                profile.batch_size)
                emit(LogRow(epoch, "val", val_loss, val_acc, optimizer.lr))
                monitored = val_acc

            if out_dir is not None:
                save_checkpoint(last_path, model.state_arrays(),
                                optimizer.snapshot(epoch), config_snapshot)
            if monitored is not None and monitored > best_accuracy:
                best_epoch, best_accuracy = epoch, monitored
                if out_dir is not None:
                    save_checkpoint(best_path, model.state_arrays(),
                                    optimizer.snapshot(epoch), config_snapshot)
    finally:
        if log_fh is not None:
            log_fh.close()
    return TrainResult(rows, best_epoch, best_accuracy, log_path, last_path,
                       best_path, model)


def read_log(path: Path) -> list[LogRow]:
    """Parse a train_log.csv back into rows (used when resuming)."""
    rows = []
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise ConfigError(f"{path}: not a training log")
    for ln in lines[1:]:
        epoch, split, loss, acc, lr = ln.split(",")
        rows.append(LogRow(int(epoch), split, float(loss), float(acc), float(lr)))
    return rows


def model_from_snapshot(text: str):
    """Rebuild the model a checkpoint's config snapshot describes."""
    values = cfg.parse_kv(text)
    for key in ("variant", "geometry", "classes", "dropout", "model_seed"):
        if key not in values:
            raise ConfigError(f"config snapshot is missing {key!r}")
    if values["geometry"] not in GEOMETRIES:
        raise ConfigError(f"unknown geometry {values['geometry']!r} in snapshot")
    model = build_variant(
        values["variant"],
        values["geometry"],
        classes=cfg.coerce_int("classes", values["classes"]),
        dropout=cfg.coerce_float("dropout", values["dropout"]),
        seed=cfg.coerce_int("model_seed", values["model_seed"]),
    )
    return model, values


def resume(
    checkpoint_path: Path,
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray | None = None,
    val_y: np.ndarray | None = None,
    out_dir: Path | None = None,
) -> TrainResult:
    """Continue a checkpointed run through its profile's final epoch."""
    ckpt = load_checkpoint(checkpoint_path)
    model, values = model_from_snapshot(ckpt.config_text)
    model.load_state_arrays(ckpt.arrays)
    profile_name = values.get("profile", DEFAULT_PROFILE)
    if profile_name not in PROFILES:
        raise ConfigError(f"unknown profile {profile_name!r} in snapshot")
    profile = PROFILES[profile_name]
    optimizer = SgdMomentum(profile.lr, profile.momentum)
    optimizer.restore(ckpt.optimizer)
    seed = cfg.coerce_int("seed", values.get("seed", 0))
    prior_rows: list[LogRow] = []
    if out_dir is not None and (Path(out_dir) / "train_log.csv").is_file():
        prior_rows = read_log(Path(out_dir) / "train_log.csv")
    return train(
        model, train_x, train_y, val_x, val_y, profile=profile, seed=seed,
        out_dir=out_dir, config_snapshot=ckpt.config_text,
        start_epoch=ckpt.optimizer.epoch + 1, optimizer=optimizer,
        log_rows=prior_rows,
    )
