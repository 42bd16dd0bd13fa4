"""Ranking and calibration metrics for binary click predictions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PROB_FLOOR = 1e-12


class MetricsError(Exception):
    """The metric is undefined for the given labels."""


def tied_ranks(values: np.ndarray) -> np.ndarray:
    """1-based ranks where runs of equal values share their average rank."""
    v = np.asarray(values, dtype=np.float64).ravel()
    n = v.size
    order = np.argsort(v, kind="stable")
    sorted_v = v[order]
    uniq, first = np.unique(sorted_v, return_index=True)
    counts = np.diff(np.append(first, n))
    # average of positions first+1 .. first+count
    average = first + (counts + 1) / 2.0
    run_of = np.searchsorted(uniq, sorted_v)
    ranks = np.empty(n)
    ranks[order] = average[run_of]
    return ranks


def compute_auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative; ties count half.

    Rank-sum form: sum the tied ranks of the positives, subtract the minimal
    possible positive rank mass, normalize by the number of pos/neg pairs.
    """
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.size != y.size:
        raise MetricsError(f"{s.size} scores for {y.size} labels")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos + n_neg != y.size:
        raise MetricsError("labels must be 0 or 1")
    if n_pos == 0 or n_neg == 0:
        raise MetricsError(
            f"AUC undefined with {n_pos} positives and {n_neg} negatives")
    ranks = tied_ranks(s)
    positive_rank_sum = float(ranks[y == 1].sum())
    return (positive_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def log_loss(probs, labels) -> float:
    """Mean negative log likelihood with probabilities clamped away from 0/1."""
    p = np.clip(np.asarray(probs, dtype=np.float64).ravel(),
                PROB_FLOOR, 1.0 - PROB_FLOOR)
    y = np.asarray(labels, dtype=np.float64).ravel()
    if p.size != y.size:
        raise MetricsError(f"{p.size} probabilities for {y.size} labels")
    if p.size == 0:
        raise MetricsError("log loss undefined on an empty batch")
    return float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).mean())


@dataclass(frozen=True)
class MetricReport:
    count: int
    positives: int
    auc: float
    logloss: float

    def as_dict(self) -> dict:
        return {"count": self.count, "positives": self.positives,
                "auc": self.auc, "logloss": self.logloss}


def evaluate_predictions(probs, labels) -> MetricReport:
    y = np.asarray(labels).ravel()
    return MetricReport(
        count=int(y.size),
        positives=int((y == 1).sum()),
        auc=compute_auc(probs, y),
        logloss=log_loss(probs, y),
    )
