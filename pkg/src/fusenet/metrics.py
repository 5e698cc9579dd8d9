"""Scores, multi-run aggregation and the two-sample z statistic."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DegenerateComparisonError, EvaluationError


def predict_classes(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(scores, axis=1)


def accuracy(pred_classes, true_classes) -> float:
    pred, true = np.asarray(pred_classes), np.asarray(true_classes)
    if pred.shape != true.shape or pred.size == 0:
        raise EvaluationError(f"prediction shape {pred.shape} vs truth shape {true.shape}")
    return float(np.mean(pred == true))


def macro_accuracy(pred_classes, true_classes, n_classes: int) -> float:
    """Mean over classes of per-class recall."""
    pred, true = np.asarray(pred_classes), np.asarray(true_classes)
    if pred.shape != true.shape:
        raise EvaluationError(f"prediction shape {pred.shape} vs truth shape {true.shape}")
    if np.any((true < 0) | (true >= n_classes)) or np.any((pred < 0) | (pred >= n_classes)):
        raise EvaluationError(f"class indices must lie in [0, {n_classes})")
    per_class = []
    for c in range(n_classes):
        members = true == c
        if not members.any():
            raise EvaluationError(f"class {c} is absent from the ground truth")
        per_class.append(np.mean(pred[members] == c))
    return float(np.mean(per_class))


def micro_f1(pred_scores, true_multihot, threshold: float = 0.5) -> float:
    """F1 from TP/FP/FN pooled over every (sample, label) pair.

    A score counts as positive when ``score >= threshold``. Returns 0 when
    there are no positives in either prediction or truth.
    """
    scores, truth = np.asarray(pred_scores, dtype=float), np.asarray(true_multihot)
    if scores.shape != truth.shape:
        raise EvaluationError(f"score shape {scores.shape} vs truth shape {truth.shape}")
    pred = scores >= threshold
    truth = truth.astype(bool)
    tp = int(np.sum(pred & truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    denom = 2 * tp + fp + fn
    return 0.0 if denom == 0 else 2 * tp / denom


@dataclass
class RunScores:
    method: str
    scores: list[float]
    metric: str = "score"

    def __post_init__(self):
        if not self.scores:
            raise ContractError(f"{self.method}: no scores to aggregate")
        if not all(math.isfinite(s) for s in self.scores):
            raise ContractError(f"{self.method}: non-finite score in {self.scores}")


def aggregate_runs(scores: RunScores | Sequence[float]) -> tuple[float, float | None]:
    """Arithmetic mean and sample (n - 1) standard deviation; std is ``None`` for one score."""
    values = scores.scores if isinstance(scores, RunScores) else list(scores)
    if not values:
        raise ContractError("cannot aggregate an empty score list")
    arr = np.asarray(values, dtype=float)
    m = float(arr.mean())
    if arr.size < 2:
        return m, None
    return m, float(arr.std(ddof=1))


def two_sample_z(mean1: float, std1: float, n1: int, mean2: float, std2: float, n2: int) -> float:
    """Unpooled two-sample z: ``(m1 - m2) / sqrt(s1^2/n1 + s2^2/n2)``."""
    if n1 < 2 or n2 < 2:
        raise ContractError(f"need at least 2 runs per side, got {n1} and {n2}")
    if std1 < 0 or std2 < 0:
        raise ContractError(f"standard deviations must be non-negative, got {std1}, {std2}")
    if std1 == 0 and std2 == 0:
        raise DegenerateComparisonError("both standard deviations are zero")
    return (mean1 - mean2) / math.sqrt(std1 ** 2 / n1 + std2 ** 2 / n2)
