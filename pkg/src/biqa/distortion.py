"""Distortion-specific routing.

Synthetic datasets get a supervised multiclass classifier over (optionally
merged) distortion labels; authentic datasets get unsupervised k-means over
hand-crafted low-level statistics. Either way, each sub-image is routed to a
group whose dedicated regressor scores it.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.ndimage import convolve

from . import gbt
from .errors import ConfigurationError, DataError, FitError, GeometryError
from .images import SubImage

LAPLACIAN = np.array([[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]])
SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T

LOWLEVEL_DIM = 14


def lowlevel_features_planes(y: np.ndarray, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """14 low-level statistics of a sub-image given its planes.

    Per filter (Laplacian, Sobel-x, Sobel-y on Y, replicate border): mean,
    variance, max of the absolute response. Then per-channel variances of
    Y, U, V, and the skewness and kurtosis of Y (both 0 for flat input).
    """
    feats = []
    for kernel in (LAPLACIAN, SOBEL_X, SOBEL_Y):
        resp = np.abs(convolve(y, kernel, mode="nearest"))
        feats.extend([resp.mean(), resp.var(), resp.max()])
    feats.extend([y.var(), u.var(), v.var()])
    var = y.var()
    if var > 0:
        centered = y - y.mean()
        feats.append(np.mean(centered**3) / var**1.5)
        feats.append(np.mean(centered**4) / var**2 - 3.0)
    else:
        feats.extend([0.0, 0.0])
    return np.array(feats, dtype=np.float64)


def lowlevel_features(sub: SubImage) -> np.ndarray:
    return lowlevel_features_planes(sub.y_plane, sub.u_plane, sub.v_plane)


def lowlevel_features_batch(subs) -> np.ndarray:
    return np.stack([lowlevel_features(s) for s in subs])


def parse_merge_map(path) -> dict:
    """Read a `raw_type_id=group_id` per line text file ('#' comments allowed)."""
    merge = {}
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            try:
                raw, group = line.split("=")
                merge[int(raw)] = int(group)
            except ValueError as exc:
                raise ConfigurationError(f"{path}:{line_no}: expected raw_id=group_id, got {line!r}") from exc
    if not merge:
        raise ConfigurationError(f"{path}: empty merge map")
    return merge


def _validate_merge_map(merge: dict) -> int:
    groups = sorted(set(merge.values()))
    if groups != list(range(len(groups))):
        raise ConfigurationError(f"merge map groups must be dense 0..k-1, got {groups}")
    if len(groups) < 2:
        raise ConfigurationError("merge map must produce at least 2 groups")
    return len(groups)


@dataclass
class DistortionRouter:
    """Either a fitted classifier (synthetic) or normalized k-means centroids
    (authentic)."""

    kind: str  # "classifier" | "clusterer"
    k: int
    classifier: Optional[gbt.GbtModel] = None
    merge_map: Optional[dict] = None
    centroids: Optional[np.ndarray] = None
    lowlevel_mean: Optional[np.ndarray] = None
    lowlevel_std: Optional[np.ndarray] = None

    def merged_label(self, raw_type: int) -> int:
        if self.merge_map is None:
            return int(raw_type)
        try:
            return self.merge_map[int(raw_type)]
        except KeyError:
            raise DataError(f"distortion type {raw_type} missing from merge map") from None

    def normalize(self, feats: np.ndarray) -> np.ndarray:
        return (feats - self.lowlevel_mean) / self.lowlevel_std


def fit_router_synthetic(features, type_labels, merge_map: Optional[dict], params: gbt.GbtParams,
                         val_features=None, val_labels=None) -> DistortionRouter:
    """Train the distortion classifier on selected sub-image features."""
    type_labels = np.asarray(type_labels, dtype=np.int64)
    if merge_map is None:
        raw = sorted(set(int(t) for t in type_labels))
        merge_map = {t: i for i, t in enumerate(raw)}
    k = _validate_merge_map(merge_map)
    merged = np.array([merge_map[int(t)] for t in type_labels])
    merged_val = None
    if val_labels is not None:
        merged_val = np.array([merge_map[int(t)] for t in val_labels])
    model = gbt.fit_classifier(features, merged, val_features, merged_val, params)
    return DistortionRouter(kind="classifier", k=k, classifier=model, merge_map=merge_map)


def _kmeans_pp_init(x: np.ndarray, k: int, rng) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]))
    centroids[0] = x[rng.integers(n)]
    d2 = np.sum((x - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0:
            raise FitError(f"fewer than {k} distinct points for k-means")
        centroids[i] = x[rng.choice(n, p=d2 / total)]
        d2 = np.minimum(d2, np.sum((x - centroids[i]) ** 2, axis=1))
    return centroids


def kmeans_fit(x: np.ndarray, k: int, seed: int, max_iter: int = 300, tol: float = 1e-6):
    """k-means++ seeding then Lloyd iterations until centroid movement < tol.

    Returns (centroids, objective_history); the history holds the
    sum-of-squared-distance objective after every assignment step.
    """
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp_init(x, k, rng)
    history = []
    for _ in range(max_iter):
        d2 = ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        assigned_d2 = d2[np.arange(x.shape[0]), assign]
        history.append(float(assigned_d2.sum()))
        new = centroids.copy()
        for c in range(k):
            members = assign == c
            if members.any():
                new[c] = x[members].mean(axis=0)
            else:
                # deterministic restart: farthest point from its centroid
                new[c] = x[int(np.argmax(assigned_d2))]
        movement = np.sqrt(((new - centroids) ** 2).sum(axis=1)).max()
        centroids = new
        if movement < tol:
            break
    return centroids, history


def fit_router_authentic(subs, k: int = 4, seed: int = 0) -> DistortionRouter:
    """Cluster sub-images by z-scored low-level features (k-means++ / Lloyd)."""
    feats = lowlevel_features_batch(subs)
    return fit_router_authentic_from_features(feats, k=k, seed=seed)


def fit_router_authentic_from_features(feats: np.ndarray, k: int = 4, seed: int = 0) -> DistortionRouter:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.shape[0] < k * 10:
        raise FitError(f"need at least {k * 10} sub-images for {k} clusters, have {feats.shape[0]}")
    mean = feats.mean(axis=0)
    std = feats.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    z = (feats - mean) / std
    if np.unique(z, axis=0).shape[0] < k:
        raise FitError(f"fewer than {k} distinct points for k-means")
    centroids, _ = kmeans_fit(z, k, seed)
    return DistortionRouter(
        kind="clusterer", k=k, centroids=centroids, lowlevel_mean=mean, lowlevel_std=std
    )


def route(router: DistortionRouter, features: np.ndarray) -> np.ndarray:
    """Group ids for a batch of feature rows (selected features for the
    classifier, raw low-level features for the clusterer)."""
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if router.kind == "classifier":
        labels, _ = gbt.predict_class(router.classifier, features)
        return labels
    if features.shape[1] != router.centroids.shape[1]:
        raise GeometryError(
            f"expected {router.centroids.shape[1]} low-level dims, got {features.shape[1]}"
        )
    z = router.normalize(features)
    d2 = ((z[:, None, :] - router.centroids[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def image_group(sub_groups) -> int:
    """Majority vote over per-sub-image group ids; ties go to the lower id."""
    sub_groups = np.asarray(sub_groups, dtype=np.int64)
    if sub_groups.size == 0:
        raise DataError("no sub-image groups to vote on")
    return int(np.argmax(np.bincount(sub_groups)))
