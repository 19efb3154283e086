"""Supervised feature selection by the relevant feature test.

Each feature dimension is scored independently: split its range in two at a
candidate threshold, represent each side by the mean target of its samples,
and take the weighted regression RMSE of the best split as the dimension's
cost. Lower cost means a more relevant dimension.
"""

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, DegenerateInputError

DEFAULT_BINS = 15


@dataclass
class RftResult:
    costs: np.ndarray        # per-dimension RMSE
    order: np.ndarray        # dimension indices, ascending cost
    selected: np.ndarray     # prefix of `order`
    thresholds: np.ndarray   # best partition point per dimension (NaN if none)


def candidate_thresholds(values: np.ndarray, bins: int) -> np.ndarray:
    """Interior quantiles of the values, uniform in rank space."""
    qs = np.arange(1, bins + 1, dtype=np.float64) / (bins + 1)
    return np.quantile(values, qs)


def rft_score(values, targets, bins: int = DEFAULT_BINS):
    """Best two-bin partition cost of one feature dimension.

    Returns (cost, threshold). A constant feature gets the sentinel cost
    std(targets) with a NaN threshold.
    """
    v = np.asarray(values, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64)
    if v.shape != y.shape or v.ndim != 1:
        raise DegenerateInputError(f"values/targets must be equal-length 1D, got {v.shape}/{y.shape}")
    if v.size < 2:
        raise DegenerateInputError("need at least 2 samples")
    if np.ptp(v) == 0:
        return float(np.std(y)), float("nan")
    n = v.size
    best_cost, best_thr = None, float("nan")
    for thr in candidate_thresholds(v, bins):
        mask = v <= thr
        nl = int(mask.sum())
        if nl == 0 or nl == n:
            continue
        yl = y[mask]
        yr = y[~mask]
        sse = np.sum((yl - yl.mean()) ** 2) + np.sum((yr - yr.mean()) ** 2)
        cost = np.sqrt(sse / n)
        if best_cost is None or cost < best_cost:
            best_cost, best_thr = cost, thr
    if best_cost is None:
        return float(np.std(y)), float("nan")
    return float(best_cost), float(best_thr)


def select(matrix, targets, count: int, bins: int = DEFAULT_BINS) -> RftResult:
    """Score every column and keep the `count` lowest-cost dimensions.

    Ties in cost break toward the lower column index.
    """
    x = np.asarray(matrix)
    if x.ndim != 2:
        raise ConfigurationError(f"matrix must be 2D, got shape {x.shape}")
    dims = x.shape[1]
    if count > dims:
        raise ConfigurationError(f"cannot select {count} of {dims} dimensions")
    costs = np.empty(dims)
    thresholds = np.empty(dims)
    y = np.asarray(targets, dtype=np.float64)
    for j in range(dims):
        costs[j], thresholds[j] = rft_score(x[:, j].astype(np.float64), y, bins)
    order = np.argsort(costs, kind="stable")
    return RftResult(costs=costs, order=order, selected=order[:count].copy(), thresholds=thresholds)


def elbow(costs_sorted) -> int:
    """Index on an ascending cost curve farthest from the first-to-last chord.

    A flat curve has no elbow and returns the last index; other distance ties
    break toward the lower index.
    """
    c = np.asarray(costs_sorted, dtype=np.float64)
    if c.size < 3:
        raise DegenerateInputError("elbow needs at least 3 points")
    if c[0] == c[-1] and np.ptp(c) == 0:
        return int(c.size - 1)
    x = np.arange(c.size, dtype=np.float64)
    dx, dy = x[-1] - x[0], c[-1] - c[0]
    # perpendicular distance to the chord, up to a constant factor
    dist = np.abs(dy * (x - x[0]) - dx * (c - c[0]))
    return int(np.argmax(dist))


def write_cost_curve(result: RftResult, path) -> None:
    """Dump the sorted cost curve as CSV: rank, dim_index, rmse."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "dim_index", "rmse"])
        for rank, dim in enumerate(result.order):
            writer.writerow([rank, int(dim), repr(float(result.costs[dim]))])
