"""Confusion matrices, classification metrics and threshold-swept ROC points."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

DEFAULT_THETAS = tuple(round(0.1 * k, 1) for k in range(1, 10))


class _Undefined:
    """Marker for a metric whose denominator vanishes; never a number."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self):
        return "UNDEFINED"

    def __str__(self):
        return "undefined"

    def __bool__(self):
        return False


UNDEFINED = _Undefined()


def is_undefined(value) -> bool:
    return value is UNDEFINED


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "tn", "fp", "fn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v}")
            object.__setattr__(self, name, int(v))

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def apply_threshold(probability: float, theta: float) -> int:
    """1 iff ``probability >= theta``; ties accept."""
    return int(probability >= theta)


def confusion(probabilities: Sequence[float], labels: Sequence[int], theta: float) -> ConfusionMatrix:
    p = np.asarray(probabilities, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if p.shape != y.shape:
        raise ValueError(f"{p.size} probabilities but {y.size} labels")
    if p.size == 0:
        raise ValueError("need at least one prediction")
    if not np.isin(y, (0, 1)).all():
        raise ValueError("labels must be binary")
    pred = p >= theta
    pos = y == 1
    return ConfusionMatrix(
        tp=int(np.sum(pred & pos)),
        tn=int(np.sum(~pred & ~pos)),
        fp=int(np.sum(pred & ~pos)),
        fn=int(np.sum(~pred & pos)),
    )


def accuracy(cm: ConfusionMatrix):
    if cm.total == 0:
        return UNDEFINED
    return (cm.tp + cm.tn) / cm.total


def precision(cm: ConfusionMatrix):
    if cm.tp + cm.fp == 0:
        return UNDEFINED
    return cm.tp / (cm.tp + cm.fp)


def recall(cm: ConfusionMatrix):
    if cm.tp + cm.fn == 0:
        return UNDEFINED
    return cm.tp / (cm.tp + cm.fn)


def f1(cm: ConfusionMatrix):
    pr, re = precision(cm), recall(cm)
    if pr is UNDEFINED or re is UNDEFINED or pr + re == 0:
        return UNDEFINED
    if pr == re:
        return pr
    return 2 * pr * re / (pr + re)


def mcc(cm: ConfusionMatrix) -> float:
    """Matthews correlation; 0 when any marginal in the denominator is empty."""
    denom = (cm.tp + cm.fp) * (cm.tp + cm.fn) * (cm.tn + cm.fp) * (cm.tn + cm.fn)
    if denom == 0:
        return 0.0
    return (cm.tp * cm.tn - cm.fp * cm.fn) / math.sqrt(denom)


def false_positive_rate(cm: ConfusionMatrix):
    if cm.fp + cm.tn == 0:
        return UNDEFINED
    return cm.fp / (cm.fp + cm.tn)


def all_metrics(cm: ConfusionMatrix) -> dict:
    return {"ACC": accuracy(cm), "PR": precision(cm), "RE": recall(cm), "F1": f1(cm), "MCC": mcc(cm)}


@dataclass(frozen=True)
class RocPoint:
    theta: float
    fpr: float
    re: float


@dataclass
class RocCurve:
    points: list[RocPoint]

    @property
    def thetas(self) -> list[float]:
        return [p.theta for p in self.points]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["theta", "FPR", "RE"])
            for p in sorted(self.points, key=lambda q: q.theta):
                w.writerow([format_value(p.theta), format_value(p.fpr), format_value(p.re)])
        return path


def roc_curve(probabilities: Sequence[float], labels: Sequence[int],
              thetas: Sequence[float] = DEFAULT_THETAS) -> RocCurve:
    thetas = [float(t) for t in thetas]
    if not thetas:
        raise ValueError("need at least one threshold")
    if any(not 0.0 < t < 1.0 for t in thetas):
        raise ValueError("thresholds must lie in (0, 1)")
    if any(b <= a for a, b in zip(thetas, thetas[1:])):
        raise ValueError("thresholds must be strictly increasing")
    y = np.asarray(labels)
    if not ((y == 0).any() and (y == 1).any()):
        raise ValueError("ROC points need both labels present")
    points = []
    for t in thetas:
        cm = confusion(probabilities, labels, t)
        points.append(RocPoint(t, false_positive_rate(cm), recall(cm)))
    return RocCurve(points)


def best_threshold(thetas: Sequence[float], accuracies: Sequence[float]) -> float:
    """Threshold with the highest accuracy; ties go to the one closest to 0.5."""
    if len(thetas) == 0 or len(thetas) != len(accuracies):
        raise ValueError("need a nonempty sweep with one accuracy per threshold")
    best = max(a for a in accuracies if a is not UNDEFINED)
    tied = [t for t, a in zip(thetas, accuracies) if a is not UNDEFINED and a == best]
    return min(tied, key=lambda t: (abs(t - 0.5), t))


def format_value(v) -> str:
    if v is UNDEFINED:
        return "undefined"
    if isinstance(v, float):
        return repr(v)
    return str(v)


METRIC_COLUMNS = ("env", "mode", "T_max", "L", "m", "theta", "seed", "ACC", "PR", "RE", "F1", "MCC")


def write_metrics_csv(rows: Sequence[dict], path) -> Path:
    """Rows carry every key in :data:`METRIC_COLUMNS`; extra keys are ignored."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in rows:
            w.writerow([format_value(row[c]) for c in METRIC_COLUMNS])
    return path
