"""Weighted classification metrics, confusion matrices, ROC/PR curves, AUC.

Weighted metrics are computed in exact rational arithmetic so that the
identity "weighted recall == accuracy" holds exactly, not merely to float
tolerance.  Curves are threshold sweeps over the distinct scores; AUC is
the trapezoidal area, which equals the Mann-Whitney pair statistic with
ties counted one half.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .errors import DataError

_trapezoid = getattr(np, "trapezoid", getattr(np, "trapz", None))


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # (K, K); rows = true class, columns = predicted

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 2 or self.counts.shape[0] != self.counts.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {self.counts.shape}")
        if (self.counts < 0).any():
            raise ValueError("confusion matrix entries must be non-negative")

    @property
    def num_classes(self):
        return self.counts.shape[0]

    @property
    def total(self):
        return int(self.counts.sum())

    def support(self, i):
        return int(self.counts[i].sum())

    def predicted(self, i):
        return int(self.counts[:, i].sum())


def confusion(true_labels, predicted_labels, num_classes=3) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise ValueError(f"label arrays differ in shape: {t.shape} vs {p.shape}")
    for name, arr in (("true", t), ("predicted", p)):
        if arr.size and (arr.min() < 0 or arr.max() >= num_classes):
            raise ValueError(f"{name} labels out of range [0, {num_classes})")
    counts = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


@dataclass
class MetricsReport:
    per_class_precision: list
    per_class_recall: list
    per_class_f1: list
    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    accuracy: float
    degenerate_classes: list  # classes with zero support or zero predictions
    per_class_auc: list | None = None
    weighted_auc: float | None = None
    exact: dict = field(default_factory=dict, repr=False)  # Fraction-valued

    def to_json(self):
        d = {k: v for k, v in self.__dict__.items() if k != "exact"}
        return json.dumps(d, sort_keys=True)


def weighted_metrics(cm: ConfusionMatrix) -> MetricsReport:
    """Per-class and support-weighted P/R/F1 plus accuracy.

    Zero-division policy: a class that is never predicted gets P_i = 0, a
    class with zero support gets R_i = 0; both are flagged as degenerate.
    Weighted F1 is the harmonic mean of weighted P and weighted R.
    """
    total = cm.total
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    k = cm.num_classes
    degenerate = []
    precision, recall, f1 = [], [], []
    for i in range(k):
        tp = int(cm.counts[i, i])
        support = cm.support(i)
        predicted = cm.predicted(i)
        if predicted == 0 or support == 0:
            degenerate.append(i)
        p_i = Fraction(tp, predicted) if predicted else Fraction(0)
        r_i = Fraction(tp, support) if support else Fraction(0)
        precision.append(p_i)
        recall.append(r_i)
        f1.append(2 * p_i * r_i / (p_i + r_i) if p_i + r_i else Fraction(0))

    weights = [Fraction(cm.support(i), total) for i in range(k)]
    wp = sum(w * p for w, p in zip(weights, precision))
    wr = sum(w * r for w, r in zip(weights, recall))
    acc = Fraction(int(np.trace(cm.counts)), total)
    wf1 = 2 * wp * wr / (wp + wr) if wp + wr else Fraction(0)

    return MetricsReport(
        per_class_precision=[float(p) for p in precision],
        per_class_recall=[float(r) for r in recall],
        per_class_f1=[float(f) for f in f1],
        weighted_precision=float(wp),
        weighted_recall=float(wr),
        weighted_f1=float(wf1),
        accuracy=float(acc),
        degenerate_classes=degenerate,
        exact={
            "weighted_precision": wp,
            "weighted_recall": wr,
            "weighted_f1": wf1,
            "accuracy": acc,
        },
    )


@dataclass
class CurveSeries:
    kind: str  # "ROC" or "PR"
    points: list  # ordered (threshold, x, y)

    def to_csv(self):
        lines = ["threshold,x,y"]
        for t, x, y in self.points:
            lines.append(f"{t},{x},{y}")
        return "\n".join(lines) + "\n"


def _sorted_sweep(scores, truth):
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    if scores.shape != truth.shape or scores.ndim != 1:
        raise ValueError("scores and truth must be 1-D arrays of equal length")
    order = np.argsort(-scores, kind="stable")
    return scores[order], truth[order].astype(np.float64)


def roc_curve(scores, truth) -> CurveSeries:
    """One-vs-rest ROC: (FPR, TPR) at thresholds swept over distinct scores."""
    s, t = _sorted_sweep(scores, truth)
    pos = t.sum()
    neg = len(t) - pos
    if pos == 0 or neg == 0:
        raise DataError("ROC needs at least one positive and one negative sample")
    tp = np.cumsum(t)
    fp = np.cumsum(1.0 - t)
    # keep only the last index of each distinct-score run
    keep = np.nonzero(np.diff(s, append=-np.inf))[0]
    points = [(float("inf"), 0.0, 0.0)]
    for i in keep:
        points.append((float(s[i]), float(fp[i] / neg), float(tp[i] / pos)))
    return CurveSeries("ROC", points)


def auc(curve: CurveSeries) -> float:
    """Trapezoidal area under an ROC curve."""
    if curve.kind != "ROC":
        raise ValueError(f"auc expects an ROC curve, got {curve.kind!r}")
    if len(curve.points) < 2:
        raise ValueError("need at least 2 curve points")
    xs = np.array([p[1] for p in curve.points])
    ys = np.array([p[2] for p in curve.points])
    return float(_trapezoid(ys, xs))


def roc_auc(scores, truth) -> float:
    return auc(roc_curve(scores, truth))


def pr_curve(scores, truth) -> CurveSeries:
    """Precision-recall points per descending threshold.

    Anchored at (recall 0, precision of the top-ranked threshold).
    """
    s, t = _sorted_sweep(scores, truth)
    pos = t.sum()
    if pos == 0:
        raise DataError("PR curve needs at least one positive sample")
    tp = np.cumsum(t)
    predicted = np.arange(1, len(t) + 1, dtype=np.float64)
    keep = np.nonzero(np.diff(s, append=-np.inf))[0]
    first = keep[0]
    points = [(float("inf"), 0.0, float(tp[first] / predicted[first]))]
    for i in keep:
        points.append((float(s[i]), float(tp[i] / pos), float(tp[i] / predicted[i])))
    return CurveSeries("PR", points)


def one_vs_rest(labels, num_classes):
    """K binary truth vectors; vector k is 1 where label == k."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels out of range [0, {num_classes})")
    return [(labels == k).astype(np.int64) for k in range(num_classes)]


def multiclass_auc(score_matrix, labels, num_classes):
    """Per-class one-vs-rest AUC plus the support-weighted aggregate."""
    score_matrix = np.asarray(score_matrix, dtype=np.float64)
    truths = one_vs_rest(labels, num_classes)
    per_class = []
    for k, truth in enumerate(truths):
        try:
            per_class.append(roc_auc(score_matrix[:, k], truth))
        except DataError:
            per_class.append(float("nan"))
    supports = np.array([t.sum() for t in truths], dtype=np.float64)
    valid = ~np.isnan(per_class)
    weighted = float(
        np.sum(np.array(per_class)[valid] * supports[valid]) / supports[valid].sum()
    ) if valid.any() and supports[valid].sum() > 0 else float("nan")
    return per_class, weighted
