"""Threshold-sweep metrics on final-question scores.

A sample is predicted positive iff ``score >= threshold``; tied scores flip
together. Curves sweep every distinct score plus the sentinels 0 and 1+eps.
"""

from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np
from pydantic import BaseModel

from .errors import ConfigError, DegenerateInputError
from .models import ScoredPrediction

ABOVE_ONE = 1.0 + 1e-9


class OperatingPoint(BaseModel):
    threshold: float
    precision: Optional[float]  # None when nothing is predicted positive
    recall: float
    tp: int
    fp: int
    fn: int


class PRCurve(BaseModel):
    points: List[OperatingPoint]  # ascending threshold
    n_positive: int
    n_negative: int


def _arrays(preds: Sequence[ScoredPrediction]) -> tuple[np.ndarray, np.ndarray]:
    scores = np.array([p.score for p in preds], dtype=np.float64)
    labels = np.array([p.label for p in preds], dtype=np.int64)
    return scores, labels


def _counts(scores: np.ndarray, labels: np.ndarray, threshold: float) -> tuple[int, int, int]:
    predicted = scores >= threshold
    positive = labels == 1
    tp = int(np.sum(predicted & positive))
    fp = int(np.sum(predicted & ~positive))
    fn = int(np.sum(~predicted & positive))
    return tp, fp, fn


def pr_curve(preds: Sequence[ScoredPrediction]) -> PRCurve:
    scores, labels = _arrays(preds)
    n_positive = int(np.sum(labels == 1))
    n_negative = len(labels) - n_positive
    if n_positive == 0 or n_negative == 0:
        raise DegenerateInputError("the PR curve needs at least one positive and one negative example")

    thresholds = np.unique(np.concatenate([[0.0, ABOVE_ONE], scores]))
    # Counts of each class scoring >= t, via sorted score arrays.
    pos_sorted = np.sort(scores[labels == 1])
    neg_sorted = np.sort(scores[labels != 1])
    tps = n_positive - np.searchsorted(pos_sorted, thresholds, side="left")
    fps = n_negative - np.searchsorted(neg_sorted, thresholds, side="left")

    points = []
    for threshold, tp, fp in zip(thresholds, tps, fps):
        tp, fp = int(tp), int(fp)
        points.append(
            OperatingPoint(
                threshold=float(threshold),
                precision=tp / (tp + fp) if tp + fp else None,
                recall=tp / n_positive,
                tp=tp,
                fp=fp,
                fn=n_positive - tp,
            )
        )
    return PRCurve(points=points, n_positive=n_positive, n_negative=n_negative)


def recall_at_precision(curve: PRCurve, p_min: float) -> float:
    """Largest recall among points with precision >= ``p_min``; 0 when none qualifies."""
    if not 0.0 < p_min <= 1.0:
        raise ConfigError(f"precision floor {p_min} must lie in (0, 1]")
    feasible = [p.recall for p in curve.points if p.precision is not None and p.precision >= p_min]
    return max(feasible, default=0.0)


def precision_at_recall(curve: PRCurve, r_min: float) -> float:
    """Largest precision among points with recall >= ``r_min``; 0 when none qualifies."""
    if not 0.0 <= r_min <= 1.0:
        raise ConfigError(f"recall floor {r_min} must lie in [0, 1]")
    feasible = [p.precision for p in curve.points if p.precision is not None and p.recall >= r_min]
    return max(feasible, default=0.0)


def f1_from_counts(tp: int, fp: int, fn: int) -> float:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def f1_score(preds: Sequence[ScoredPrediction], threshold: float = 0.5) -> float:
    scores, labels = _arrays(preds)
    return f1_from_counts(*_counts(scores, labels, threshold))


def best_f1(curve: PRCurve) -> float:
    """Largest F1 over every operating point of the curve."""
    return max(f1_from_counts(p.tp, p.fp, p.fn) for p in curve.points)
