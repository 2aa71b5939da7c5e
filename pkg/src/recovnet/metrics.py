"""Confusion-matrix scoring for the two-class screen, plus pixel variants.

The positive class is ``covid``; ``control`` is negative. True positives
count correctly flagged covid samples, true negatives correctly passed
control samples, and the false counts are the corresponding mistakes.
Metrics with a zero denominator raise :class:`UndefinedMetricError`
instead of returning NaN so degenerate evaluation sets fail loudly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import UndefinedMetricError

POSITIVE_LABEL = "covid"
NEGATIVE_LABEL = "control"


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "fp", "tn", "fn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v!r}")
            object.__setattr__(self, name, int(v))

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(
            self.tp + other.tp, self.fp + other.fp, self.tn + other.tn, self.fn + other.fn
        )


def confusion_matrix(predicted: list[str], truth: list[str]) -> ConfusionMatrix:
    """Tally prediction/truth label pairs into a confusion matrix."""
    if len(predicted) != len(truth):
        raise ValueError(f"length mismatch: {len(predicted)} predictions vs {len(truth)} truths")
    if not truth:
        raise UndefinedMetricError("cannot score zero samples")
    tp = fp = tn = fn = 0
    for p, t in zip(predicted, truth):
        if p not in (POSITIVE_LABEL, NEGATIVE_LABEL):
            raise ValueError(f"unknown predicted label {p!r}")
        if t not in (POSITIVE_LABEL, NEGATIVE_LABEL):
            raise ValueError(f"unknown truth label {t!r}")
        if t == POSITIVE_LABEL:
            if p == POSITIVE_LABEL:
                tp += 1
            else:
                fn += 1
        else:
            if p == NEGATIVE_LABEL:
                tn += 1
            else:
                fp += 1
    return ConfusionMatrix(tp, fp, tn, fn)


def _ratio(num: int, den: int, what: str) -> float:
    if den == 0:
        raise UndefinedMetricError(f"{what} is undefined: zero denominator")
    return num / den


def sensitivity(cm: ConfusionMatrix) -> float:
    """tp / (tp + fn): the rate of detected positive samples."""
    return _ratio(cm.tp, cm.tp + cm.fn, "sensitivity")


def specificity(cm: ConfusionMatrix) -> float:
    """tn / (tn + fp): the rate of passed negative samples."""
    return _ratio(cm.tn, cm.tn + cm.fp, "specificity")


def precision(cm: ConfusionMatrix) -> float:
    """tp / (tp + fp): how many positive calls were right."""
    return _ratio(cm.tp, cm.tp + cm.fp, "precision")


def accuracy(cm: ConfusionMatrix) -> float:
    """(tp + tn) / total."""
    return _ratio(cm.tp + cm.tn, cm.total, "accuracy")


def f_score(precision_value: float, sensitivity_value: float, beta: float) -> float:
    """Weighted harmonic combination of precision and sensitivity.

    ``(1 + beta^2) * p * s / (beta^2 * p + s)``. With beta=1 this is the
    plain harmonic mean (F1); beta=2 weights sensitivity higher (F2).
    """
    if beta <= 0:
        raise ValueError(f"beta must be > 0, got {beta}")
    denom = beta * beta * precision_value + sensitivity_value
    if denom == 0:
        raise UndefinedMetricError("f_score is undefined: zero denominator")
    return (1.0 + beta * beta) * precision_value * sensitivity_value / denom


@dataclass(frozen=True)
class MetricsReport:
    """The six derived rates, as fractions in [0, 1]."""

    sensitivity: float
    specificity: float
    precision: float
    f1: float
    f2: float
    accuracy: float

    _FIELDS = ("sensitivity", "specificity", "precision", "f1", "f2", "accuracy")

    def as_percent(self, ndigits: int = 3) -> dict[str, float]:
        """Values in percent, rounded half-even to ``ndigits`` decimals."""
        return {
            name: round(getattr(self, name) * 100.0, ndigits) for name in self._FIELDS
        }


def full_report(cm: ConfusionMatrix) -> MetricsReport:
    """All six metrics from one confusion matrix."""
    sens = sensitivity(cm)
    prec = precision(cm)
    return MetricsReport(
        sensitivity=sens,
        specificity=specificity(cm),
        precision=prec,
        f1=f_score(prec, sens, 1.0),
        f2=f_score(prec, sens, 2.0),
        accuracy=accuracy(cm),
    )


def pixel_confusion(pred_mask: np.ndarray, truth_mask: np.ndarray) -> ConfusionMatrix:
    """Per-pixel confusion matrix with mask foreground as the positive class.

    Matrices for a whole test set aggregate by summation.
    """
    pred_mask = np.asarray(pred_mask)
    truth_mask = np.asarray(truth_mask)
    if pred_mask.shape != truth_mask.shape:
        raise ValueError(
            f"shape mismatch: pred {pred_mask.shape} vs truth {truth_mask.shape}"
        )
    p = pred_mask > 0.5
    t = truth_mask > 0.5
    return ConfusionMatrix(
        tp=int(np.sum(p & t)),
        fp=int(np.sum(p & ~t)),
        tn=int(np.sum(~p & ~t)),
        fn=int(np.sum(~p & t)),
    )


_TABLE_COLUMNS = ("Sensitivity", "Specificity", "Precision", "F1-Score", "F2-Score", "Accuracy")
_COLUMN_FIELDS = ("sensitivity", "specificity", "precision", "f1", "f2", "accuracy")


def render_markdown(report: MetricsReport, name: str = "model") -> str:
    """One-row Markdown table of the percent-rendered metrics."""
    pct = report.as_percent()
    header = "| Model | " + " | ".join(_TABLE_COLUMNS) + " |"
    rule = "|" + "---|" * (len(_TABLE_COLUMNS) + 1)
    row = f"| {name} | " + " | ".join(f"{pct[f]:.3f}" for f in _COLUMN_FIELDS) + " |"
    return "\n".join([header, rule, row]) + "\n"


def write_report_csv(report: MetricsReport, path: str | Path) -> Path:
    path = Path(path)
    pct = report.as_percent()
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for f in _COLUMN_FIELDS:
            writer.writerow([f, f"{pct[f]:.3f}"])
    return path


def write_cm_csv(cm: ConfusionMatrix, path: str | Path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["tp", "fp", "tn", "fn"])
        writer.writerow([cm.tp, cm.fp, cm.tn, cm.fn])
    return path
