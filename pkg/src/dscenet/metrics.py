"""Evaluation metrics: confusion counts, precision/recall/F1, ROC and AUC.

The four-class problem is scored one-vs-rest per class and macro-averaged
(unweighted class mean). ROC curves come from a descending threshold sweep
over the unique scores, with tied scores sharing a single threshold point;
AUC is the trapezoidal area under that curve, which equals the pairwise
rank statistic P(score+ > score-) + 0.5 * P(tie).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DegenerateInputError

N_CLASSES = 4


@dataclass
class ConfusionMatrix:
    """counts[t][p]: cases with true class t predicted as p."""

    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def confusion(y_true, y_pred, n_classes: int = N_CLASSES) -> ConfusionMatrix:
    y_true = [int(v) for v in y_true]
    y_pred = [int(v) for v in y_pred]
    if len(y_true) != len(y_pred):
        raise ContractError(f"length mismatch: {len(y_true)} labels vs {len(y_pred)} predictions")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(y_true, y_pred):
        if not (0 <= t < n_classes and 0 <= p < n_classes):
            raise ContractError(f"label pair ({t}, {p}) out of range for {n_classes} classes")
        counts[t, p] += 1
    return ConfusionMatrix(counts)


def accuracy(cm: ConfusionMatrix) -> float:
    if cm.total == 0:
        raise ContractError("empty confusion matrix")
    return float(np.trace(cm.counts)) / cm.total


def prf1(cm: ConfusionMatrix, k: int) -> tuple[float, float, float]:
    """One-vs-rest precision, recall, F1 for class k; 0 when undefined."""
    tp = int(cm.counts[k, k])
    fp = int(cm.counts[:, k].sum()) - tp
    fn = int(cm.counts[k, :].sum()) - tp
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * tp / (2 * tp + fp + fn) if 2 * tp + fp + fn > 0 else 0.0
    return precision, recall, f1


@dataclass
class RocCurve:
    """(FPR, TPR) points from (0,0) to (1,1); thresholds align with points.

    The first threshold is +inf for the (0,0) point; each remaining one is a
    unique score value, descending. Predicting positive means score >= t.
    """

    thresholds: list[float]
    points: list[tuple[float, float]]


def roc_curve(scores, labels) -> RocCurve:
    scores = [float(s) for s in scores]
    labels = [int(v) for v in labels]
    if len(scores) != len(labels):
        raise ContractError(f"length mismatch: {len(scores)} scores vs {len(labels)} labels")
    if any(v not in (0, 1) for v in labels):
        raise ContractError("labels must be binary")
    n_pos = sum(labels)
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateInputError("ROC needs at least one positive and one negative case")

    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    thresholds = [math.inf]
    points = [(0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(order):
        t = scores[order[i]]
        while i < len(order) and scores[order[i]] == t:
            if labels[order[i]] == 1:
                tp += 1
            else:
                fp += 1
            i += 1
        thresholds.append(t)
        points.append((fp / n_neg, tp / n_pos))
    return RocCurve(thresholds, points)


def auc(curve: RocCurve) -> float:
    """Trapezoidal area under the curve."""
    total = 0.0
    for (x0, y0), (x1, y1) in zip(curve.points, curve.points[1:]):
        total += (x1 - x0) * (y0 + y1) / 2.0
    return total


@dataclass
class ClassMetrics:
    label: str
    precision: float
    recall: float
    f1: float
    auc: float


@dataclass
class MetricsReport:
    confusion: ConfusionMatrix
    accuracy: float
    per_class: list[ClassMetrics]
    macro_precision: float
    macro_recall: float
    macro_f1: float
    macro_auc: float
    roc: list[RocCurve]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro": {
                "precision": self.macro_precision,
                "recall": self.macro_recall,
                "f1": self.macro_f1,
                "auc": self.macro_auc,
            },
            "per_class": [
                {
                    "label": c.label,
                    "precision": c.precision,
                    "recall": c.recall,
                    "f1": c.f1,
                    "auc": c.auc,
                }
                for c in self.per_class
            ],
            "confusion": self.confusion.counts.tolist(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def report(y_true, probabilities, class_names: tuple[str, ...] | None = None) -> MetricsReport:
    """Score argmax predictions and one-vs-rest ROC per class.

    ``probabilities`` is cases x classes with rows summing to 1 (1e-6);
    argmax ties break toward the lowest class index.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    if probs.ndim != 2:
        raise ContractError("probabilities must be a 2-D array")
    n_classes = probs.shape[1]
    if class_names is None:
        from .data import CLASS_NAMES

        class_names = CLASS_NAMES if n_classes == len(CLASS_NAMES) else tuple(
            f"class_{k}" for k in range(n_classes)
        )
    if np.abs(probs.sum(axis=1) - 1.0).max() > 1e-6:
        raise ContractError("probability rows must sum to 1 within 1e-6")
    y_true = [int(v) for v in y_true]
    if len(y_true) != probs.shape[0]:
        raise ContractError("label count does not match probability rows")

    y_pred = probs.argmax(axis=1).tolist()  # np.argmax takes the first maximum
    cm = confusion(y_true, y_pred, n_classes)

    per_class = []
    curves = []
    for k in range(n_classes):
        precision, recall, f1 = prf1(cm, k)
        binary = [1 if t == k else 0 for t in y_true]
        curve = roc_curve(probs[:, k], binary)
        curves.append(curve)
        per_class.append(ClassMetrics(class_names[k], precision, recall, f1, auc(curve)))

    return MetricsReport(
        confusion=cm,
        accuracy=accuracy(cm),
        per_class=per_class,
        macro_precision=sum(c.precision for c in per_class) / n_classes,
        macro_recall=sum(c.recall for c in per_class) / n_classes,
        macro_f1=sum(c.f1 for c in per_class) / n_classes,
        macro_auc=sum(c.auc for c in per_class) / n_classes,
        roc=curves,
    )


def roc_csv(curve: RocCurve) -> str:
    lines = ["threshold,fpr,tpr"]
    for t, (fpr, tpr) in zip(curve.thresholds, curve.points):
        lines.append(f"{'inf' if math.isinf(t) else repr(t)},{fpr!r},{tpr!r}")
    return "\n".join(lines) + "\n"


def format_percent(x: float) -> str:
    """Two-decimal percent rendering used in printed tables."""
    return f"{100.0 * x:.2f}"
