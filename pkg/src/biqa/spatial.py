"""Per-plane spatial representations.

A sub-image plane is channelized by 8x8 block DCT; the DC map is decorrelated
by up to two cascaded 4x4 Saab hops whose terminal coefficients are kept
verbatim (they carry the low-frequency detail), while mid/high-frequency
channels are aggregated by abs-max pooling followed by [max, mean, std]
statistics and a per-channel PCA.

When a map's side is not divisible by the next stage's window it is
center-cropped to the largest fitting multiple; padding would contaminate the
statistics with synthetic content.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import FitError, GeometryError
from .transforms import (
    CovAccumulator,
    PcaBasis,
    SaabKernel,
    abs_max_pool,
    apply_saab_batch,
    block_dct_8x8_batch,
    center_crop_to_multiple,
    fit_saab_from_moments,
    pca_fit_from_moments,
)

HOP_PATCH = 4
POOL = 2
DEFAULT_PCA_COMPONENTS = 8
MIN_FIT_SUBIMAGES = 100


@dataclass
class SpatialGeometry:
    """Shape arithmetic of the spatial pipeline for one sub-image side."""

    side: int
    dct_side: int
    hop1_in: int
    hop1_side: int
    has_hop2: bool
    hop2_in: int
    hop2_side: int
    top_pool_entries: int
    hop1_pool_entries: int

    @classmethod
    def for_side(cls, side: int) -> "SpatialGeometry":
        if side % 8:
            raise GeometryError(f"sub-image side {side} not divisible by 8")
        dct_side = side // 8
        if dct_side < HOP_PATCH:
            raise GeometryError(f"side {side} gives a {dct_side}x{dct_side} DC map, too small for a Saab hop")
        hop1_in = (dct_side // HOP_PATCH) * HOP_PATCH
        hop1_side = hop1_in // HOP_PATCH
        has_hop2 = hop1_side >= HOP_PATCH
        hop2_in = (hop1_side // HOP_PATCH) * HOP_PATCH if has_hop2 else 0
        hop2_side = hop2_in // HOP_PATCH if has_hop2 else 0
        top_pool_entries = (dct_side // POOL) ** 2
        hop1_pool_entries = (hop1_side // POOL) ** 2 if has_hop2 else 0
        return cls(
            side=side,
            dct_side=dct_side,
            hop1_in=hop1_in,
            hop1_side=hop1_side,
            has_hop2=has_hop2,
            hop2_in=hop2_in,
            hop2_side=hop2_side,
            top_pool_entries=top_pool_entries,
            hop1_pool_entries=hop1_pool_entries,
        )

    @property
    def block_length(self) -> int:
        """Raw coefficients kept from the terminal hop."""
        square = self.hop2_side if self.has_hop2 else self.hop1_side
        return 16 * square * square

    @property
    def n_aggregated(self) -> int:
        """Channels entering the stats/PCA aggregation: top-level AC1..63,
        plus Hop1 AC1..15 unless Hop1 is terminal (its coefficients are then
        already kept verbatim)."""
        return 63 + (15 if self.has_hop2 else 0)

    def aggregated_entries(self) -> np.ndarray:
        ent = [self.top_pool_entries] * 63
        if self.has_hop2:
            ent += [self.hop1_pool_entries] * 15
        return np.array(ent, dtype=np.int64)


@dataclass
class SpatialModel:
    """Fitted per-plane extractor. `agg_pca` holds one basis per aggregated
    channel, or None where the pooled map is too small for projection."""

    geometry: SpatialGeometry
    hop1_kernel: SaabKernel
    hop2_kernel: Optional[SaabKernel]
    agg_pca: list
    pca_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.pca_counts is None:
            self.pca_counts = np.array(
                [0 if b is None else b.n_components for b in self.agg_pca], dtype=np.int64
            )

    @property
    def feature_length(self) -> int:
        g = self.geometry
        return g.block_length + 3 * g.n_aggregated + int(self.pca_counts.sum())


def _saab_patches(maps: np.ndarray, crop_to: int) -> np.ndarray:
    """Flattened non-overlapping 4x4 patches of (N, H, W) maps, cropped first."""
    cropped = center_crop_to_multiple(maps, HOP_PATCH) if maps.shape[-1] != crop_to else maps
    n, h, _ = cropped.shape
    s = h // HOP_PATCH
    blocks = cropped.reshape(n, s, HOP_PATCH, s, HOP_PATCH)
    return np.moveaxis(blocks, 2, 3).reshape(n * s * s, HOP_PATCH * HOP_PATCH)


def _pooled(maps: np.ndarray) -> np.ndarray:
    """abs-max-pool channel maps (N, C, H, W) after an even center crop."""
    h = maps.shape[-1]
    if h % POOL:
        maps = center_crop_to_multiple(maps, POOL)
    return abs_max_pool(maps, POOL)


class SpatialFitter:
    """Two-sweep streaming fitter.

    Sweep 1 consumes raw planes, accumulates Hop1 patch moments and pooled
    top-level channel moments, and hands back the (small) DC maps for the
    caller to cache. Sweep 2 consumes those DC maps to fit Hop2 and the Hop1
    aggregation moments.
    """

    def __init__(self, side: int, pca_components: int = DEFAULT_PCA_COMPONENTS):
        self.geometry = SpatialGeometry.for_side(side)
        self.pca_components = pca_components
        self.count = 0
        self._hop1_acc = CovAccumulator(HOP_PATCH * HOP_PATCH)
        g = self.geometry
        self._top_accs = None
        if pca_components and g.top_pool_entries >= pca_components:
            self._top_accs = [CovAccumulator(g.top_pool_entries) for _ in range(63)]
        self._hop2_acc = CovAccumulator(HOP_PATCH * HOP_PATCH) if g.has_hop2 else None
        self._hop1_ac_accs = None
        if g.has_hop2 and pca_components and g.hop1_pool_entries >= pca_components:
            self._hop1_ac_accs = [CovAccumulator(g.hop1_pool_entries) for _ in range(15)]
        self.hop1_kernel = None

    def sweep1(self, planes: np.ndarray) -> np.ndarray:
        """Accumulate from raw planes; returns DC maps for sweep 2."""
        g = self.geometry
        if planes.shape[1] != g.side or planes.shape[2] != g.side:
            raise GeometryError(f"expected {g.side}x{g.side} planes, got {planes.shape[1:]}")
        self.count += planes.shape[0]
        dct = block_dct_8x8_batch(planes)
        patches = _saab_patches(dct[:, 0], g.hop1_in)
        self._hop1_acc.add(patches - patches.mean(axis=1, keepdims=True))
        if self._top_accs is not None:
            pooled = _pooled(dct[:, 1:]).reshape(planes.shape[0], 63, -1)
            for c in range(63):
                self._top_accs[c].add(pooled[:, c])
        return dct[:, 0]

    def finish_sweep1(self) -> None:
        if self.count < MIN_FIT_SUBIMAGES:
            raise FitError(f"need at least {MIN_FIT_SUBIMAGES} sub-images, have {self.count}")
        self.hop1_kernel = fit_saab_from_moments(self._hop1_acc, (HOP_PATCH, HOP_PATCH))

    def sweep2(self, dc_maps: np.ndarray) -> None:
        if self.hop1_kernel is None:
            raise FitError("finish_sweep1() must run before sweep 2")
        g = self.geometry
        if not g.has_hop2:
            return
        cropped = center_crop_to_multiple(dc_maps, HOP_PATCH) if g.hop1_in != g.dct_side else dc_maps
        hop1_out = apply_saab_batch(self.hop1_kernel, cropped)
        hop2_patches = _saab_patches(hop1_out[:, 0], g.hop2_in)
        self._hop2_acc.add(hop2_patches - hop2_patches.mean(axis=1, keepdims=True))
        if self._hop1_ac_accs is not None:
            pooled = _pooled(hop1_out[:, 1:]).reshape(dc_maps.shape[0], 15, -1)
            for c in range(15):
                self._hop1_ac_accs[c].add(pooled[:, c])

    def finish(self) -> SpatialModel:
        g = self.geometry
        hop2 = fit_saab_from_moments(self._hop2_acc, (HOP_PATCH, HOP_PATCH)) if g.has_hop2 else None
        bases = []
        for accs, n_ch in ((self._top_accs, 63), (self._hop1_ac_accs, 15 if g.has_hop2 else 0)):
            if n_ch == 0:
                continue
            if accs is None:
                bases.extend([None] * n_ch)
            else:
                bases.extend(pca_fit_from_moments(a, self.pca_components) for a in accs)
        return SpatialModel(geometry=g, hop1_kernel=self.hop1_kernel, hop2_kernel=hop2, agg_pca=bases)


def fit_spatial(planes: np.ndarray, pca_components: int = DEFAULT_PCA_COMPONENTS) -> SpatialModel:
    """Fit the spatial extractor on a stack of training planes (N, S, S)."""
    planes = np.asarray(planes, dtype=np.float64)
    if planes.ndim != 3:
        raise GeometryError(f"expected (N, S, S) planes, got {planes.shape}")
    fitter = SpatialFitter(planes.shape[1], pca_components)
    dc = fitter.sweep1(planes)
    fitter.finish_sweep1()
    fitter.sweep2(dc)
    return fitter.finish()


def extract_spatial_batch(model: SpatialModel, planes: np.ndarray) -> np.ndarray:
    """Feature matrix (N, L) for a batch of planes of the fitted side.

    Layout: terminal-hop coefficients, then [max, mean, std] per aggregated
    channel, then per-channel PCA projections of the pooled maps.
    """
    g = model.geometry
    planes = np.asarray(planes, dtype=np.float64)
    if planes.ndim != 3 or planes.shape[1] != g.side or planes.shape[2] != g.side:
        raise GeometryError(f"expected (N, {g.side}, {g.side}) planes, got {planes.shape}")
    n = planes.shape[0]
    dct = block_dct_8x8_batch(planes)
    dc = dct[:, 0]
    cropped = center_crop_to_multiple(dc, HOP_PATCH) if g.hop1_in != g.dct_side else dc
    hop1_out = apply_saab_batch(model.hop1_kernel, cropped)

    if g.has_hop2:
        h2in = hop1_out[:, 0]
        h2in = center_crop_to_multiple(h2in, HOP_PATCH) if g.hop1_side != g.hop2_in else h2in
        block = apply_saab_batch(model.hop2_kernel, h2in).reshape(n, -1)
    else:
        block = hop1_out.reshape(n, -1)

    pooled_list = [_pooled(dct[:, 1:]).reshape(n, 63, -1)]
    if g.has_hop2:
        pooled_list.append(_pooled(hop1_out[:, 1:]).reshape(n, 15, -1))

    stats_cols = []
    pca_cols = []
    ch = 0
    for pooled in pooled_list:
        stats_cols.append(
            np.stack([pooled.max(axis=2), pooled.mean(axis=2), pooled.std(axis=2)], axis=2).reshape(n, -1)
        )
        for c in range(pooled.shape[1]):
            basis = model.agg_pca[ch]
            if basis is not None:
                pca_cols.append(pooled[:, c] @ basis.components.T - basis.offset)
            ch += 1
    parts = [block] + stats_cols + pca_cols
    return np.concatenate(parts, axis=1)


def extract_spatial(model: SpatialModel, plane: np.ndarray) -> np.ndarray:
    """Feature vector of a single plane; same path as the batch extractor."""
    return extract_spatial_batch(model, np.asarray(plane, dtype=np.float64)[None])[0]


def extract_spatial_yuv(model_y, model_u, model_v, sub) -> np.ndarray:
    """Concatenated Y, U, V spatial features of one sub-image."""
    return np.concatenate(
        [
            extract_spatial(model_y, sub.y_plane),
            extract_spatial(model_u, sub.u_plane),
            extract_spatial(model_v, sub.v_plane),
        ]
    )


def prune_spatial(model: SpatialModel, keep: np.ndarray):
    """Reduce per-channel PCA bases to the component rows named in `keep`
    (indices into this plane's feature vector). Returns the pruned model and
    the old->new index map for the surviving dimensions.

    Non-PCA dimensions are always kept: they carry no stored parameters, so
    pruning them would only complicate the layout bookkeeping.
    """
    g = model.geometry
    fixed = g.block_length + 3 * g.n_aggregated
    keep = np.asarray(keep, dtype=np.int64)
    wanted_pca = set(int(i) - fixed for i in keep if i >= fixed)
    bases = []
    index_map = {i: i for i in range(fixed)}
    old_pos = 0
    new_pos = fixed
    for basis, count in zip(model.agg_pca, model.pca_counts):
        rows = [r for r in range(count) if old_pos + r in wanted_pca]
        if rows:
            sub = PcaBasis(
                mean=basis.mean,
                components=basis.components[rows],
                explained_variance=basis.explained_variance[rows],
                offset=basis.offset[rows],
            )
            bases.append(sub)
            for r in rows:
                index_map[fixed + old_pos + r] = new_pos
                new_pos += 1
        else:
            bases.append(None)
        old_pos += count
    pruned = SpatialModel(
        geometry=g,
        hop1_kernel=model.hop1_kernel,
        hop2_kernel=model.hop2_kernel,
        agg_pca=bases,
        pca_counts=None,
    )
    return pruned, index_map
