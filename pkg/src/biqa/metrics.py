"""Rank-correlation evaluation metrics: PLCC and SROCC."""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError


def _validated(pred, truth):
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(truth, dtype=np.float64)
    if p.shape != t.shape or p.ndim != 1:
        raise DegenerateInputError(f"inputs must be equal-length 1D vectors, got {p.shape} / {t.shape}")
    if p.size < 2:
        raise DegenerateInputError("need at least 2 samples")
    if np.ptp(p) == 0 or np.ptp(t) == 0:
        raise DegenerateInputError("constant input vector")
    return p, t


def plcc(pred, truth) -> float:
    """Pearson linear correlation coefficient."""
    p, t = _validated(pred, truth)
    dp = p - p.mean()
    dt = t - t.mean()
    return float(np.sum(dp * dt) / (np.sqrt(np.sum(dp * dp)) * np.sqrt(np.sum(dt * dt))))


def average_ranks(values) -> np.ndarray:
    """1-based ranks with ties assigned the mean rank of the tied group."""
    v = np.asarray(values)
    order = np.argsort(v, kind="stable")
    ranks = np.empty(v.size, dtype=np.float64)
    sv = v[order]
    i = 0
    while i < v.size:
        j = i
        while j + 1 < v.size and sv[j + 1] == sv[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def srocc(pred, truth) -> float:
    """Spearman rank-order correlation: Pearson correlation of average ranks.

    Reduces to 1 - 6*sum(d^2)/(L*(L^2-1)) when there are no ties.
    """
    p, t = _validated(pred, truth)
    return plcc(average_ranks(p), average_ranks(t))


@dataclass
class EvalReport:
    """Correlation metrics of one evaluation run."""

    plcc: float
    srocc: float
    n: int
    seed: int


def evaluate(pred, truth, seed: int = 0) -> EvalReport:
    p = np.asarray(pred, dtype=np.float64)
    return EvalReport(plcc=plcc(pred, truth), srocc=srocc(pred, truth), n=p.size, seed=seed)
