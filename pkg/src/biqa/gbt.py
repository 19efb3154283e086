"""Gradient-boosted regression trees, built from scratch.

Used both as the quality regressor and, with softmax coupling (one tree per
class per round), as the multiclass distortion classifier. Trees are grown
greedily on histogram split candidates (per-feature quantile grid); tree
structure is found on a row subsample while leaf values are refit on the full
training set, which keeps the training loss non-increasing round to round.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError, FitError, GeometryError

N_BINS = 32  # histogram resolution: 31 interior quantile edges per feature


@dataclass
class GbtParams:
    max_depth: int = 5
    subsample: float = 0.6
    max_trees: int = 2000
    learning_rate: float = 0.05
    early_stop_rounds: int = 50
    min_samples_leaf: int = 5
    seed: int = 0

    def validate(self):
        if not 0 < self.subsample <= 1:
            raise DataError(f"subsample must be in (0, 1], got {self.subsample}")
        if self.max_depth < 1:
            raise DataError(f"max_depth must be >= 1, got {self.max_depth}")


@dataclass
class Tree:
    """Flat array representation of one regression tree.

    feature[i] < 0 marks a leaf. Internal nodes route x to `left` when
    x[feature] < threshold, else to `right`.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    def predict(self, x: np.ndarray) -> np.ndarray:
        idx = np.zeros(x.shape[0], dtype=np.int32)
        while True:
            feat = self.feature[idx]
            active = feat >= 0
            if not active.any():
                break
            rows = np.nonzero(active)[0]
            fx = x[rows, feat[rows]]
            go_left = fx < self.threshold[idx[rows]]
            idx[rows] = np.where(go_left, self.left[idx[rows]], self.right[idx[rows]])
        return self.value[idx]


def quantile_bin_edges(column: np.ndarray, n_bins: int = N_BINS) -> np.ndarray:
    """Deduplicated interior quantile edges used as split candidates."""
    qs = np.arange(1, n_bins, dtype=np.float64) / n_bins
    edges = np.quantile(column, qs)
    return np.unique(edges)


class _BinnedData:
    """Per-feature quantile binning of a feature matrix."""

    def __init__(self, x: np.ndarray):
        n, f = x.shape
        self.n_features = f
        self.edges = []
        self.codes = np.empty((n, f), dtype=np.uint8)
        for j in range(f):
            col = x[:, j]
            e = quantile_bin_edges(col)
            self.edges.append(e)
            self.codes[:, j] = np.searchsorted(e, col, side="right")
        self.n_edges = np.array([len(e) for e in self.edges], dtype=np.int64)

    def bin(self, x: np.ndarray) -> np.ndarray:
        out = np.empty((x.shape[0], self.n_features), dtype=np.uint8)
        for j in range(self.n_features):
            out[:, j] = np.searchsorted(self.edges[j], x[:, j], side="right")
        return out


class _TreeGrower:
    """Grows one tree on binned data with histogram split search."""

    def __init__(self, binned: _BinnedData, max_depth: int, min_leaf: int):
        self.binned = binned
        self.max_depth = max_depth
        self.min_leaf = min_leaf
        f = binned.n_features
        self._offsets = (np.arange(f, dtype=np.int64) * N_BINS)[None, :]
        # mask of valid split positions: bin b splittable iff b < n_edges[f]
        cols = np.arange(N_BINS - 1)[None, :]
        self._valid_edge = cols < binned.n_edges[:, None]

    def _histograms(self, rows, grad):
        codes = self.binned.codes[rows].astype(np.int64)
        flat = (codes + self._offsets).ravel()
        w = np.repeat(grad[rows], self.binned.n_features)
        size = self.binned.n_features * N_BINS
        hg = np.bincount(flat, weights=w, minlength=size).reshape(-1, N_BINS)
        hc = np.bincount(flat, minlength=size).reshape(-1, N_BINS).astype(np.float64)
        return hg, hc

    def _best_split(self, hg, hc):
        gl = np.cumsum(hg, axis=1)[:, : N_BINS - 1]
        cl = np.cumsum(hc, axis=1)[:, : N_BINS - 1]
        gt = hg.sum(axis=1, keepdims=True)
        ct = hc.sum(axis=1, keepdims=True)
        gr = gt - gl
        cr = ct - cl
        valid = self._valid_edge & (cl >= self.min_leaf) & (cr >= self.min_leaf)
        with np.errstate(divide="ignore", invalid="ignore"):
            gain = gl * gl / cl + gr * gr / cr - gt * gt / ct
        gain = np.where(valid, gain, -np.inf)
        flat_best = int(np.argmax(gain))  # first max: lowest feature, lowest bin
        best_gain = gain.ravel()[flat_best]
        if not np.isfinite(best_gain) or best_gain <= 1e-12:
            return None
        return flat_best // (N_BINS - 1), flat_best % (N_BINS - 1)

    def grow(self, rows: np.ndarray, grad: np.ndarray) -> Tree:
        feature, threshold, left, right, value, split_bin = [], [], [], [], [], []

        def new_node():
            feature.append(-1)
            threshold.append(0.0)
            left.append(-1)
            right.append(-1)
            value.append(0.0)
            split_bin.append(-1)
            return len(feature) - 1

        root = new_node()
        # stack entries: (node, rows, depth, histograms or None)
        stack = [(root, rows, 0, None)]
        while stack:
            node, node_rows, depth, hists = stack.pop()
            if depth >= self.max_depth or node_rows.size < 2 * self.min_leaf:
                value[node] = float(grad[node_rows].mean()) if node_rows.size else 0.0
                continue
            if hists is None:
                hists = self._histograms(node_rows, grad)
            split = self._best_split(*hists)
            if split is None:
                value[node] = float(grad[node_rows].mean()) if node_rows.size else 0.0
                continue
            f, b = split
            go_left = self.binned.codes[node_rows, f] <= b
            rows_l, rows_r = node_rows[go_left], node_rows[~go_left]
            feature[node] = f
            threshold[node] = float(self.binned.edges[f][b])
            split_bin[node] = b
            nl, nr = new_node(), new_node()
            left[node], right[node] = nl, nr
            # histogram subtraction: compute the smaller child, derive the other
            if rows_l.size <= rows_r.size:
                hl = self._histograms(rows_l, grad)
                hr = (hists[0] - hl[0], hists[1] - hl[1])
            else:
                hr = self._histograms(rows_r, grad)
                hl = (hists[0] - hr[0], hists[1] - hr[1])
            stack.append((nr, rows_r, depth + 1, hr))
            stack.append((nl, rows_l, depth + 1, hl))
        tree = Tree(
            feature=np.array(feature, dtype=np.int32),
            threshold=np.array(threshold, dtype=np.float64),
            left=np.array(left, dtype=np.int32),
            right=np.array(right, dtype=np.int32),
            value=np.array(value, dtype=np.float64),
        )
        self._split_bins = np.array(split_bin, dtype=np.int32)
        return tree

    def leaf_of(self, tree: Tree, codes: np.ndarray) -> np.ndarray:
        """Leaf index of each binned row under `tree`."""
        idx = np.zeros(codes.shape[0], dtype=np.int32)
        while True:
            feat = tree.feature[idx]
            active = feat >= 0
            if not active.any():
                break
            rows = np.nonzero(active)[0]
            go_left = codes[rows, feat[rows]] <= self._split_bins[idx[rows]]
            idx[rows] = np.where(go_left, tree.left[idx[rows]], tree.right[idx[rows]])
        return idx


def _refit_leaves(tree: Tree, leaf_idx: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """Replace leaf values by full-data gradient means; returns per-row values."""
    sums = np.bincount(leaf_idx, weights=grad, minlength=tree.n_nodes)
    counts = np.bincount(leaf_idx, minlength=tree.n_nodes)
    occupied = counts > 0
    tree.value[occupied] = sums[occupied] / counts[occupied]
    return tree.value[leaf_idx]


@dataclass
class GbtModel:
    """Boosted forest; a list of trees per round (regression) or per
    (round, class) pair (classification)."""

    kind: str  # "regression" | "classification"
    trees: list
    base_score: np.ndarray  # shape () for regression, (K,) for classification
    learning_rate: float
    n_features: int
    n_classes: int = 1
    train_losses: list = field(default_factory=list, repr=False)

    @property
    def n_rounds(self) -> int:
        return len(self.trees)

    @property
    def n_trees_used(self) -> int:
        return sum(1 if self.kind == "regression" else len(r) for r in self.trees)

    def _check_dim(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.n_features:
            raise GeometryError(f"expected {self.n_features} features, got {x.shape[1]}")
        return x

    def raw_scores(self, x) -> np.ndarray:
        x = self._check_dim(x)
        if self.kind == "regression":
            out = np.full(x.shape[0], float(self.base_score))
            for tree in self.trees:
                out += self.learning_rate * tree.predict(x)
            return out
        scores = np.tile(np.asarray(self.base_score, dtype=np.float64), (x.shape[0], 1))
        for round_trees in self.trees:
            for k, tree in enumerate(round_trees):
                scores[:, k] += self.learning_rate * tree.predict(x)
        return scores


def _softmax(scores: np.ndarray) -> np.ndarray:
    z = scores - scores.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def predict(model: GbtModel, x) -> np.ndarray:
    """Regression prediction; scalar input gives a scalar array of len 1."""
    if model.kind != "regression":
        raise DataError("predict() requires a regression model")
    return model.raw_scores(x)


def predict_class(model: GbtModel, x):
    """(labels, probabilities) for a classification model; ties go to the
    lowest class id."""
    if model.kind != "classification":
        raise DataError("predict_class() requires a classification model")
    probs = _softmax(model.raw_scores(x))
    return np.argmax(probs, axis=1), probs


def _validate_xy(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 1 or x.shape[0] != y.shape[0]:
        raise FitError(f"bad training shapes {x.shape} / {y.shape}")
    if x.shape[0] < 2:
        raise FitError("need at least 2 training rows")
    if not np.isfinite(y).all():
        raise DataError("NaN or Inf in targets")
    if not np.isfinite(x).all():
        raise DataError("NaN or Inf in features")
    return x, y


def _subsample_rows(rng, n: int, fraction: float) -> np.ndarray:
    m = max(1, int(n * fraction))
    return rng.permutation(n)[:m]


def fit_regressor(x, y, val_x=None, val_y=None, params: Optional[GbtParams] = None) -> GbtModel:
    """Squared-error boosting with row subsampling and validation early stop.

    Keeps the prefix of rounds with the best validation RMSE.
    """
    params = params or GbtParams()
    params.validate()
    x, y = _validate_xy(x, y)
    early = params.early_stop_rounds and params.early_stop_rounds > 0
    if early and (val_x is None or len(val_x) == 0):
        raise FitError("early stopping requires a nonempty validation set")
    rng = np.random.default_rng(params.seed)
    binned = _BinnedData(x)
    grower = _TreeGrower(binned, params.max_depth, params.min_samples_leaf)

    base = float(y.mean())
    residual = y - base
    model = GbtModel(
        kind="regression",
        trees=[],
        base_score=np.float64(base),
        learning_rate=params.learning_rate,
        n_features=x.shape[1],
    )
    prev_loss = float(np.mean(residual**2))
    if early:
        val_x = np.asarray(val_x, dtype=np.float64)
        val_y = np.asarray(val_y, dtype=np.float64)
        val_pred = np.full(val_x.shape[0], base)
        best_rmse = float(np.sqrt(np.mean((val_y - val_pred) ** 2)))
    best_round = 0

    for rnd in range(params.max_trees):
        sub = _subsample_rows(rng, x.shape[0], params.subsample)
        tree = grower.grow(sub, residual)
        leaf_idx = grower.leaf_of(tree, binned.codes)
        per_row = _refit_leaves(tree, leaf_idx, residual)
        if tree.n_nodes == 1 and abs(tree.value[0]) < 1e-15:
            break  # nothing left to fit
        residual -= params.learning_rate * per_row
        model.trees.append(tree)
        loss = float(np.mean(residual**2))
        assert loss <= prev_loss + 1e-9, "training loss increased"
        model.train_losses.append(loss)
        prev_loss = loss
        if early:
            val_pred += params.learning_rate * tree.predict(val_x)
            rmse = float(np.sqrt(np.mean((val_y - val_pred) ** 2)))
            if rmse < best_rmse:
                best_rmse, best_round = rmse, rnd + 1
            if (rnd + 1) - best_round >= params.early_stop_rounds:
                break
        else:
            best_round = rnd + 1

    model.trees = model.trees[:best_round]
    model.train_losses = model.train_losses[:best_round]
    return model


def fit_classifier(x, labels, val_x=None, val_labels=None, params: Optional[GbtParams] = None) -> GbtModel:
    """Multiclass boosting on softmax cross-entropy gradients.

    One tree per class per round; early stopping on validation accuracy.
    """
    params = params or GbtParams()
    params.validate()
    labels = np.asarray(labels)
    x, _ = _validate_xy(x, labels.astype(np.float64))
    k = int(labels.max()) + 1 if labels.size else 0
    if k < 2:
        raise DataError("classification needs at least 2 classes")
    counts = np.bincount(labels, minlength=k)
    if (counts == 0).any():
        missing = np.nonzero(counts == 0)[0].tolist()
        raise DataError(f"classes missing from training data: {missing}")
    early = params.early_stop_rounds and params.early_stop_rounds > 0
    if early and (val_x is None or len(val_x) == 0):
        raise FitError("early stopping requires a nonempty validation set")

    rng = np.random.default_rng(params.seed)
    binned = _BinnedData(x)
    grower = _TreeGrower(binned, params.max_depth, params.min_samples_leaf)
    onehot = np.zeros((x.shape[0], k))
    onehot[np.arange(x.shape[0]), labels] = 1.0

    base = np.log(counts / counts.sum())
    scores = np.tile(base, (x.shape[0], 1))
    model = GbtModel(
        kind="classification",
        trees=[],
        base_score=base,
        learning_rate=params.learning_rate,
        n_features=x.shape[1],
        n_classes=k,
    )
    if early:
        val_x = np.asarray(val_x, dtype=np.float64)
        val_labels = np.asarray(val_labels)
        val_scores = np.tile(base, (val_x.shape[0], 1))
        best_acc = float(np.mean(np.argmax(val_scores, axis=1) == val_labels))
    best_round = 0

    for rnd in range(params.max_trees):
        probs = _softmax(scores)
        grads = onehot - probs  # negative CE gradient
        sub = _subsample_rows(rng, x.shape[0], params.subsample)
        round_trees = []
        for c in range(k):
            tree = grower.grow(sub, grads[:, c])
            leaf_idx = grower.leaf_of(tree, binned.codes)
            per_row = _refit_leaves(tree, leaf_idx, grads[:, c])
            scores[:, c] += params.learning_rate * per_row
            round_trees.append(tree)
        model.trees.append(round_trees)
        loss = float(-np.mean(np.log(np.maximum(_softmax(scores)[np.arange(x.shape[0]), labels], 1e-300))))
        model.train_losses.append(loss)
        if early:
            for c in range(k):
                val_scores[:, c] += params.learning_rate * round_trees[c].predict(val_x)
            acc = float(np.mean(np.argmax(val_scores, axis=1) == val_labels))
            if acc > best_acc:
                best_acc, best_round = acc, rnd + 1
            if (rnd + 1) - best_round >= params.early_stop_rounds:
                break
        else:
            best_round = rnd + 1

    model.trees = model.trees[:best_round]
    model.train_losses = model.train_losses[:best_round]
    return model
