"""Detection metrics: accuracy, ROC-AUC and equal error rate.

AUC uses the rank-statistic (Mann-Whitney) formulation with half credit
for ties.  EER sweeps every distinct score as a threshold and linearly
interpolates between the two operating points bracketing the
false-positive / false-negative crossing.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .errors import DegenerateError, ShapeError
from .model import ForgeryModel, infer

Array = np.ndarray


@dataclass
class EvalResult:
    """One evaluation of a model on one test set."""

    accuracy: float
    auc: float
    eer: float
    n_samples: int

    def __post_init__(self):
        for name in ("accuracy", "auc", "eer"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} outside [0, 1]: {v}")
        if self.n_samples < 1:
            raise ValueError(f"n_samples must be >= 1, got {self.n_samples}")


@dataclass
class EvalMatrix:
    """K x K grid; entry (i, j) is client i's model scored on client j's test data."""

    entries: list[list[EvalResult]]

    def __post_init__(self):
        k = len(self.entries)
        if any(len(row) != k for row in self.entries):
            raise ValueError("evaluation matrix must be square")

    @property
    def size(self) -> int:
        return len(self.entries)

    def accuracy_grid(self) -> Array:
        return np.array([[cell.accuracy for cell in row] for row in self.entries])


def _validate_pair(scores, labels) -> tuple[Array, Array]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 1 or labels.ndim != 1 or scores.shape != labels.shape:
        raise ShapeError(f"scores shape {scores.shape} and labels shape {labels.shape} must be equal 1-d")
    if scores.size < 1:
        raise ShapeError("scores and labels must be non-empty")
    return scores, labels


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Fraction of samples where (score >= threshold) equals the label.

    A score exactly at the threshold counts as a positive prediction.
    """
    scores, labels = _validate_pair(scores, labels)
    predicted = (scores >= threshold).astype(np.int64)
    return float(np.count_nonzero(predicted == labels)) / scores.size


def auc(scores, labels) -> float:
    """Probability that a random positive outscores a random negative.

    Ties between a positive and a negative contribute half credit,
    matching the Mann-Whitney U statistic.
    """
    scores, labels = _validate_pair(scores, labels)
    n_pos = int(np.count_nonzero(labels == 1))
    n_neg = scores.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DegenerateError("AUC needs at least one positive and one negative sample")

    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size)
    i = 0
    while i < scores.size:
        j = i
        while j < scores.size and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j + 1)  # average 1-based rank of the tie group
        i = j
    rank_sum_pos = float(ranks[labels == 1].sum())
    return (rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _operating_points(scores: Array, labels: Array) -> tuple[Array, Array]:
    """FPR and FNR at every distinct threshold (ascending), plus the (0, 1) end."""
    n_pos = int(np.count_nonzero(labels == 1))
    n_neg = labels.size - n_pos
    order = np.argsort(scores, kind="stable")
    s_sorted = scores[order]
    pos_sorted = (labels[order] == 1).astype(np.int64)

    distinct_start = np.flatnonzero(np.r_[True, s_sorted[1:] != s_sorted[:-1]])
    # Cumulative positives strictly below each distinct threshold, and
    # negatives at-or-above it (prediction rule: score >= threshold -> fake).
    cum_pos = np.concatenate(([0], np.cumsum(pos_sorted)))
    pos_below = cum_pos[distinct_start]
    neg_at_or_above = (labels.size - distinct_start) - (n_pos - pos_below)
    fpr = np.append(neg_at_or_above / n_neg, 0.0)
    fnr = np.append(pos_below / n_pos, 1.0)
    return fpr, fnr


def eer(scores, labels) -> float:
    """Error rate at the threshold where false-positive and false-negative rates meet.

    The crossing is located on the threshold sweep over all distinct
    scores and resolved by linear interpolation between the two adjacent
    operating points that bracket it.
    """
    scores, labels = _validate_pair(scores, labels)
    n_pos = int(np.count_nonzero(labels == 1))
    if n_pos == 0 or n_pos == scores.size:
        raise DegenerateError("EER needs at least one positive and one negative sample")

    fpr, fnr = _operating_points(scores, labels)
    diff = fpr - fnr  # non-increasing along the sweep, from +1 territory to -1
    k = int(np.flatnonzero(diff <= 0.0)[0])
    if diff[k] == 0.0:
        return float(fpr[k])
    # Sign change between k-1 and k (diff[0] > 0 here since diff[0] <= 0
    # would have been caught above with k == 0).
    alpha = diff[k - 1] / (diff[k - 1] - diff[k])
    return float(fpr[k - 1] + alpha * (fpr[k] - fpr[k - 1]))


def evaluate_model(model: ForgeryModel, samples: Sequence) -> EvalResult:
    """Score a model on labeled samples and bundle the three metrics."""
    images = Tensor(np.stack([s.image.data for s in samples]))
    labels = np.array([s.label for s in samples], dtype=np.int64)
    scores = infer(model, images)
    return EvalResult(
        accuracy=accuracy(scores, labels),
        auc=auc(scores, labels),
        eer=eer(scores, labels),
        n_samples=len(samples),
    )


def cross_eval(clients: Sequence) -> EvalMatrix:
    """Evaluate every client's model on every client's test set.

    Cells are computed in row-major order, so the result is deterministic.
    ``clients`` only needs ``model`` and ``dataset.test`` attributes.
    """
    entries = [
        [evaluate_model(ci.model, cj.dataset.test) for cj in clients] for ci in clients
    ]
    return EvalMatrix(entries=entries)
