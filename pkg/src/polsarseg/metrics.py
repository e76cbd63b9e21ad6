"""Confusion-matrix evaluation: overall accuracy, per-class and mean F1,
frequency-weighted IoU.

Matrix orientation: counts[i][j] is the number of pixels whose true class is
i and predicted class is j.  Rows therefore sum to per-class pixel totals in
the reference labels, columns to prediction totals.

Empty-class policy (recorded in every report): a class absent from both truth
and prediction is excluded from the F1 mean; a class present in truth but
never predicted (or vice versa) scores F1 = 0.  fwIoU weights classes by
truth frequency, so truth-absent classes contribute nothing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError

IGNORE_INDEX = 255
EMPTY_CLASS_POLICY = ("classes absent from both truth and prediction are excluded "
                      "from the F1 mean; present-but-unmatched classes score 0")


@dataclass
class ConfusionMatrix:
    counts: np.ndarray

    @staticmethod
    def zeros(num_classes: int) -> "ConfusionMatrix":
        return ConfusionMatrix(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ShapeError(
                f"cannot merge confusion matrices of {self.num_classes} and "
                f"{other.num_classes} classes")
        return ConfusionMatrix(self.counts + other.counts)

    def __add__(self, other):
        return self.merge(other)


def accumulate_confusion(pred: np.ndarray, truth: np.ndarray, num_classes: int,
                         ignore_index: int = IGNORE_INDEX) -> ConfusionMatrix:
    """Tally one prediction/truth pair; truth pixels at ignore_index are skipped."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction shape {pred.shape} != truth shape {truth.shape}")
    if pred.size and (pred.min() < 0 or pred.max() >= num_classes):
        bad = pred[(pred < 0) | (pred >= num_classes)][0]
        raise DataError(f"prediction value {bad} outside [0, {num_classes})")
    mask = truth != ignore_index
    scored_truth = truth[mask]
    if scored_truth.size and (scored_truth.min() < 0 or scored_truth.max() >= num_classes):
        bad = scored_truth[(scored_truth < 0) | (scored_truth >= num_classes)][0]
        raise DataError(f"label value {bad} outside [0, {num_classes}) and not ignore")
    flat = scored_truth.astype(np.int64) * num_classes + pred[mask].astype(np.int64)
    counts = np.bincount(flat, minlength=num_classes * num_classes)
    return ConfusionMatrix(counts.reshape(num_classes, num_classes))


def _require_scored(cm: ConfusionMatrix) -> np.ndarray:
    counts = np.asarray(cm.counts, dtype=np.float64)
    if counts.sum() == 0:
        raise DataError("no scored pixels: every label was ignored or the matrix is empty")
    return counts


def overall_accuracy(cm: ConfusionMatrix) -> float:
    counts = _require_scored(cm)
    return float(np.trace(counts) / counts.sum())


@dataclass(frozen=True)
class ClassScore:
    class_id: int
    precision: float
    recall: float
    f1: float  # None when the class is absent from both truth and prediction
    in_truth: bool
    in_pred: bool


def f1_scores(cm: ConfusionMatrix):
    """Per-class ClassScore list and the mean over defined F1 values."""
    counts = _require_scored(cm)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    scores, defined = [], []
    for c in range(cm.num_classes):
        in_truth, in_pred = rows[c] > 0, cols[c] > 0
        if not in_truth and not in_pred:
            scores.append(ClassScore(c, 0.0, 0.0, None, False, False))
            continue
        prec = counts[c, c] / cols[c] if in_pred else 0.0
        rec = counts[c, c] / rows[c] if in_truth else 0.0
        f1 = 0.0 if prec + rec == 0 else 2.0 * prec * rec / (prec + rec)
        scores.append(ClassScore(c, float(prec), float(rec), float(f1),
                                 bool(in_truth), bool(in_pred)))
        defined.append(f1)
    return scores, float(np.mean(defined))


def fw_iou(cm: ConfusionMatrix) -> float:
    counts = _require_scored(cm)
    rows = counts.sum(axis=1)
    cols = counts.sum(axis=0)
    acc = 0.0
    for c in range(cm.num_classes):
        if rows[c] == 0:
            continue
        union = rows[c] + cols[c] - counts[c, c]
        acc += rows[c] * counts[c, c] / union
    return float(acc / counts.sum())


@dataclass
class MetricsReport:
    oa: float
    class_scores: list
    mean_f1: float
    fwiou: float
    confusion: ConfusionMatrix
    empty_class_policy: str = field(default=EMPTY_CLASS_POLICY)

    def to_dict(self) -> dict:
        return {
            "oa": self.oa,
            "mean_f1": self.mean_f1,
            "fwiou": self.fwiou,
            "empty_class_policy": self.empty_class_policy,
            "per_class": [
                {"class_id": s.class_id, "precision": s.precision, "recall": s.recall,
                 "f1": s.f1, "in_truth": s.in_truth, "in_pred": s.in_pred}
                for s in self.class_scores
            ],
            "confusion": self.confusion.counts.tolist(),
        }


def evaluate_confusion(cm: ConfusionMatrix) -> MetricsReport:
    scores, mean_f1 = f1_scores(cm)
    return MetricsReport(overall_accuracy(cm), scores, mean_f1, fw_iou(cm), cm)


def render_metrics_text(report: MetricsReport, class_names: list = None) -> str:
    lines = [
        f"oa = {report.oa:.6f}",
        f"mean_f1 = {report.mean_f1:.6f}",
        f"fwiou = {report.fwiou:.6f}",
        "",
        f"{'class':<16} {'precision':>10} {'recall':>10} {'f1':>10}",
    ]
    for s in report.class_scores:
        name = class_names[s.class_id] if class_names else f"class{s.class_id}"
        f1 = "excluded" if s.f1 is None else f"{s.f1:.6f}"
        lines.append(f"{name:<16} {s.precision:>10.6f} {s.recall:>10.6f} {f1:>10}")
    return "\n".join(lines) + "\n"
