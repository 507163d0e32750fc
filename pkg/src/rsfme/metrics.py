"""Classification metrics: confusion matrices, per-class rates, PR curves,
and a 2-D feature projection for quick visual inspection.

Orientation convention: confusion matrix rows index the predicted class,
columns the true class. Rates are reported in percent. Quantities whose
denominator is zero are None in memory and ``undef`` in CSV output.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, ShapeError

__all__ = [
    "ConfusionMatrix",
    "binary_tally",
    "ci_half_width",
    "class_metrics",
    "MetricRow",
    "MetricReport",
    "compute_metrics",
    "pr_curve",
    "auc_pr",
    "feature_projection",
    "write_metrics_csv",
    "write_pr_csv",
    "write_projection_csv",
]

Z_95 = 1.96
UNDEF = "undef"


def _fmt(value: float | None) -> str:
    return UNDEF if value is None else f"{value:.4f}"


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # [predicted, true]
    class_names: list[str]

    def __post_init__(self):
        c = len(self.class_names)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.shape != (c, c):
            raise ShapeError(f"confusion matrix {self.counts.shape} does not match "
                             f"{c} class names")
        if (self.counts < 0).any():
            raise DataError("confusion matrix counts must be non-negative")

    @classmethod
    def from_predictions(cls, predicted, true, class_names: list[str]) -> "ConfusionMatrix":
        c = len(class_names)
        counts = np.zeros((c, c), dtype=np.int64)
        np.add.at(counts, (np.asarray(predicted), np.asarray(true)), 1)
        return cls(counts, class_names)

    @classmethod
    def from_text(cls, path: Path) -> "ConfusionMatrix":
        """Fixture format: one line of class names, then one row per line."""
        lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
        if not lines:
            raise DataError(f"{path}: empty confusion matrix file")
        names = lines[0].split()
        rows = []
        for ln in lines[1:]:
            try:
                rows.append([int(tok) for tok in ln.split()])
            except ValueError as e:
                raise DataError(f"{path}: bad count line {ln!r}") from e
        if len(rows) != len(names) or any(len(r) != len(names) for r in rows):
            raise DataError(f"{path}: expected {len(names)}x{len(names)} counts")
        return cls(np.array(rows), names)

    def to_text(self, path: Path) -> None:
        with open(path, "w") as fh:
            fh.write(" ".join(self.class_names) + "\n")
            for row in self.counts:
                fh.write(" ".join(str(int(v)) for v in row) + "\n")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def overall_accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total


def binary_tally(cm: ConfusionMatrix, k: int) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) for class k against the rest."""
    tp = int(cm.counts[k, k])
    fp = int(cm.counts[k].sum()) - tp            # predicted k, actually other
    fn = int(cm.counts[:, k].sum()) - tp         # actually k, predicted other
    tn = cm.total - tp - fp - fn
    return tp, fp, fn, tn


def ci_half_width(error_rate: float, n: int) -> float:
    """Half-width of the 95% normal-approximation interval on an error rate."""
    if not 0.0 <= error_rate <= 1.0:
        raise DataError(f"error rate {error_rate} outside [0, 1]")
    if n <= 0:
        raise DataError("sample count must be positive")
    return Z_95 * math.sqrt(error_rate * (1.0 - error_rate) / n)


def _rate(num: int, den: int) -> float | None:
    return None if den == 0 else 100.0 * num / den


def _harmonic(a: float | None, b: float | None) -> float | None:
    if a is None or b is None:
        return None
    if a + b == 0.0:
        return None
    return 2.0 * a * b / (a + b)


@dataclass
class MetricRow:
    name: str
    accuracy: float | None
    sensitivity: float | None
    specificity: float | None
    precision: float | None
    f_score: float | None
    ci_half: float | None
    auc_pr: float | None = None

    def csv(self) -> str:
        return ",".join([self.name] + [_fmt(v) for v in (
            self.accuracy, self.sensitivity, self.specificity,
            self.precision, self.f_score, self.ci_half, self.auc_pr)])


@dataclass
class MetricReport:
    rows: list[MetricRow]
    summary: MetricRow   # whole-set accuracy plus unweighted class means

    def row(self, name: str) -> MetricRow:
        for r in self.rows:
            if r.name == name:
                return r
        raise KeyError(name)


def class_metrics(cm: ConfusionMatrix, k: int, auc: float | None = None) -> MetricRow:
    tp, fp, fn, tn = binary_tally(cm, k)
    acc = _rate(tp + tn, cm.total)
    sen = _rate(tp, tp + fn)
    spec = _rate(tn, tn + fp)
    pre = _rate(tp, tp + fp)
    f = _harmonic(pre, sen)
    ci = None if acc is None else 100.0 * ci_half_width(1.0 - acc / 100.0, cm.total)
    return MetricRow(cm.class_names[k], acc, sen, spec, pre, f, ci, auc)


def _mean(values: list[float | None]) -> float | None:
    kept = [v for v in values if v is not None]
    return sum(kept) / len(kept) if kept else None


def compute_metrics(cm: ConfusionMatrix,
                    aucs: list[float | None] | None = None) -> MetricReport:
    """Per-class one-vs-rest rates plus a summary row.

    The summary row's accuracy is the whole-set accuracy; its other
    columns are unweighted means over classes, with the F score taken as
    the harmonic mean of the summary precision and sensitivity.
    """
    c = len(cm.class_names)
    if aucs is None:
        aucs = [None] * c
    rows = [class_metrics(cm, k, aucs[k]) for k in range(c)]
    overall = 100.0 * cm.overall_accuracy()
    sen = _mean([r.sensitivity for r in rows])
    pre = _mean([r.precision for r in rows])
    summary = MetricRow(
        "macro",
        overall,
        sen,
        _mean([r.specificity for r in rows]),
        pre,
        _harmonic(pre, sen),
        100.0 * ci_half_width(1.0 - overall / 100.0, cm.total),
        _mean([r.auc_pr for r in rows]),
    )
    return MetricReport(rows, summary)


# -- precision/recall ---------------------------------------------------------


def pr_curve(scores: np.ndarray, is_positive: np.ndarray
             ) -> list[tuple[float, float, float]] | None:
    """(threshold, precision, recall) points from a descending sweep.

    A sample is predicted positive when its score is >= the threshold;
    thresholds run over the distinct scores. Returns None when either
    class is absent, since precision or recall is then meaningless.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_positive = np.asarray(is_positive, dtype=bool)
    if scores.shape != is_positive.shape or scores.ndim != 1:
        raise ShapeError("scores and flags must be matching 1-D arrays")
    n_pos = int(is_positive.sum())
    if n_pos == 0 or n_pos == scores.size:
        return None
    points = []
    for t in np.unique(scores)[::-1]:
        hit = scores >= t
        tp = int((hit & is_positive).sum())
        points.append((float(t), tp / int(hit.sum()), tp / n_pos))
    return points


def auc_pr(points: list[tuple[float, float, float]] | None) -> float | None:
    """Step-interpolated area: sum of precision times recall increment."""
    if points is None:
        return None
    area = 0.0
    prev_recall = 0.0
    for _, precision, recall in points:
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


def one_vs_rest_aucs(scores: np.ndarray, labels: np.ndarray,
                     n_classes: int) -> list[float | None]:
    """AUC-PR per class from a score matrix [n, n_classes]."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != (labels.size, n_classes):
        raise ShapeError(f"score matrix {scores.shape} does not match "
                         f"{labels.size} samples x {n_classes} classes")
    return [auc_pr(pr_curve(scores[:, k], labels == k)) for k in range(n_classes)]


# -- feature projection -------------------------------------------------------


def feature_projection(features: np.ndarray) -> np.ndarray | None:
    """Project row vectors onto their top two principal axes.

    Axes are eigenvectors of the sample covariance, ordered by decreasing
    eigenvalue; each axis's first nonzero loading is made positive so the
    projection is deterministic. Returns None when the features carry no
    variance at all.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3 or x.shape[1] < 2:
        raise ShapeError(f"need at least 3 vectors of width >= 2, got {x.shape}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    values, vectors = np.linalg.eigh(cov)
    if values[-1] <= 0.0 or not np.isfinite(values[-1]):
        return None
    axes = vectors[:, [-1, -2]]
    for j in range(2):
        col = axes[:, j]
        nonzero = np.nonzero(np.abs(col) > 1e-12)[0]
        if nonzero.size and col[nonzero[0]] < 0:
            axes[:, j] = -col
    return centered @ axes


# -- csv writers --------------------------------------------------------------


def write_metrics_csv(report: MetricReport, path: Path) -> None:
    with open(path, "w") as fh:
        fh.write("class,acc,sen,spec,pre,f,ci_half,auc_pr\n")
        for row in report.rows:
            fh.write(row.csv() + "\n")
        fh.write(report.summary.csv() + "\n")


def write_pr_csv(curves: dict[str, list[tuple[float, float, float]] | None],
                 path: Path) -> None:
    with open(path, "w") as fh:
        fh.write("class,threshold,precision,recall\n")
        for name, points in curves.items():
            for t, p, r in (points or []):
                fh.write(f"{name},{_fmt(t)},{_fmt(p)},{_fmt(r)}\n")


def write_projection_csv(ids: list[str], labels: list[str],
                         coords: np.ndarray, path: Path) -> None:
    with open(path, "w") as fh:
        fh.write("sample_id,label,pc1,pc2\n")
        for sid, lbl, row in zip(ids, labels, coords):
            fh.write(f"{sid},{lbl},{row[0]:.6f},{row[1]:.6f}\n")
