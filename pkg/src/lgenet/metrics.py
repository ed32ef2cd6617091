"""Confusion matrices and the per-class precision / recall / F1 report."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class ConfusionMatrix:
    """Counts with rows = ground truth and columns = prediction."""

    counts: np.ndarray
    class_names: list[str] | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix entries must be non-negative")
        if not np.all(self.counts == np.round(self.counts)):
            raise ValueError("confusion matrix entries must be integers")
        self.counts = self.counts.astype(np.int64)
        if self.class_names is None:
            self.class_names = [f"class_{i}" for i in range(len(self.counts))]
        if len(self.class_names) != len(self.counts):
            raise ValueError("one class name per row is required")

    @classmethod
    def from_labels(cls, truth, prediction, num_classes: int, class_names=None,
                    ignore_label: int = 255) -> "ConfusionMatrix":
        truth = np.asarray(truth).astype(np.int64)
        prediction = np.asarray(prediction).astype(np.int64)
        keep = truth != ignore_label
        truth, prediction = truth[keep], prediction[keep]
        if truth.size and (truth.max() >= num_classes or prediction.max() >= num_classes):
            raise ValueError("label outside the class range")
        counts = np.bincount(truth * num_classes + prediction,
                             minlength=num_classes * num_classes)
        return cls(counts.reshape(num_classes, num_classes), class_names)

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def permuted(self, order) -> "ConfusionMatrix":
        order = np.asarray(order)
        return ConfusionMatrix(self.counts[np.ix_(order, order)],
                               [self.class_names[i] for i in order])


@dataclass
class Report:
    class_names: list[str]
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    overall_accuracy: float
    average_f1: float
    support: np.ndarray


def evaluate(confusion: ConfusionMatrix) -> Report:
    """Precision = TP/(TP+FP) per column, recall = TP/(TP+FN) per row.

    Classes without ground-truth support are NaN and left out of the
    average F1 (with a warning); a class that is never predicted has
    precision NaN as well.
    """
    m = confusion.counts.astype(np.float64)
    total = m.sum()
    if total == 0:
        raise ValueError("confusion matrix is all zeros")
    tp = np.diag(m)
    predicted = m.sum(axis=0)
    support = m.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(predicted > 0, tp / predicted, np.nan)
        recall = np.where(support > 0, tp / support, np.nan)
        f1 = 2 * precision * recall / (precision + recall)
    # predicted but never right, or present but never predicted
    f1 = np.where((support > 0) & (tp == 0), 0.0, f1)
    f1 = np.where(support > 0, f1, np.nan)
    missing = [confusion.class_names[i] for i in np.flatnonzero(support == 0)]
    if missing:
        logger.warning("classes without ground-truth support excluded from average F1: %s",
                       ", ".join(missing))
    return Report(
        class_names=list(confusion.class_names),
        precision=precision, recall=recall, f1=f1,
        overall_accuracy=float(tp.sum() / total),
        average_f1=float(np.nanmean(f1)),
        support=support.astype(np.int64),
    )


def format_report(report: Report, mode: str | None = None) -> str:
    """Aligned table followed by machine-readable ``key=value`` lines."""
    lines = []
    if mode:
        lines.append(f"# metrics mode: {mode}")
    width = max(9, max(len(n) for n in report.class_names))
    lines.append(f"{'class':<{width}}  {'precision':>9}  {'recall':>9}  {'f1':>9}  {'support':>9}")
    for i, name in enumerate(report.class_names):
        lines.append(f"{name:<{width}}  {report.precision[i]:>9.3f}  {report.recall[i]:>9.3f}  "
                     f"{report.f1[i]:>9.3f}  {report.support[i]:>9d}")
    lines.append(f"{'OA':<{width}}  {report.overall_accuracy:>9.3f}")
    lines.append(f"{'avg F1':<{width}}  {report.average_f1:>9.3f}")
    if mode:
        lines.append(f"mode={mode}")
    lines.append(f"oa={report.overall_accuracy:.6f}")
    lines.append(f"avg_f1={report.average_f1:.6f}")
    for i, name in enumerate(report.class_names):
        lines.append(f"precision.{name}={report.precision[i]:.6f}")
        lines.append(f"recall.{name}={report.recall[i]:.6f}")
        lines.append(f"f1.{name}={report.f1[i]:.6f}")
    return "\n".join(lines)


def read_confusion(path) -> ConfusionMatrix:
    """Header line of C class names, then C rows of C integers."""
    rows = [line.split() for line in Path(path).read_text().splitlines()
            if line.strip() and not line.lstrip().startswith("#")]
    if not rows:
        raise ValueError(f"{path}: empty confusion-matrix file")
    names = rows[0]
    body = rows[1:]
    if len(body) != len(names):
        raise ValueError(f"{path}: {len(names)} class names but {len(body)} rows")
    counts = []
    for i, row in enumerate(body, start=2):
        if len(row) != len(names):
            raise ValueError(f"{path}: row {i} has {len(row)} entries, expected {len(names)}")
        try:
            counts.append([int(v) for v in row])
        except ValueError:
            raise ValueError(f"{path}: row {i} holds a non-integer entry") from None
    return ConfusionMatrix(np.array(counts), names)


def write_confusion(confusion: ConfusionMatrix, path) -> None:
    lines = [" ".join(confusion.class_names)]
    lines += [" ".join(str(int(v)) for v in row) for row in confusion.counts]
    Path(path).write_text("\n".join(lines) + "\n")
