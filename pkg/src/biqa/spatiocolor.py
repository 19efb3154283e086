"""Joint spatio-color representations from RGB cuboids.

One 3D Saab hop over 4x4x3 cuboids yields 48 channels; the DC channel is
decorrelated by a 2D Saab hop while the 47 AC channels pass through abs +
4x4 max pooling, giving 63 equally sized channel maps. Each map contributes
its top-N PCA projections and its standard deviation.
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
    center_crop_to_multiple,
    fit_saab_from_moments,
    pca_fit_from_moments,
)

HOP_PATCH = 4
AC_POOL = 4
N_CHANNELS = 63  # 16 second-hop + 47 pooled AC
DEFAULT_COMPONENTS = 16
MIN_FIT_CUBOIDS = 100


@dataclass
class SpatioColorGeometry:
    side: int
    hop1_side: int      # side // 4
    hop2_in: int        # largest multiple of 4 <= hop1_side
    final_side: int     # hop2_in // 4, spatial side of all 63 final channels
    entries: int        # final_side ** 2

    @classmethod
    def for_side(cls, side: int) -> "SpatioColorGeometry":
        if side % HOP_PATCH:
            raise GeometryError(f"cuboid side {side} not divisible by 4")
        hop1_side = side // HOP_PATCH
        hop2_in = (hop1_side // HOP_PATCH) * HOP_PATCH
        if hop2_in == 0:
            raise GeometryError(f"cuboid side {side} too small for the second hop")
        final = hop2_in // HOP_PATCH
        return cls(side=side, hop1_side=hop1_side, hop2_in=hop2_in, final_side=final, entries=final * final)


@dataclass
class SpatioColorModel:
    geometry: SpatioColorGeometry
    hop1_kernel: SaabKernel  # 4x4x3
    hop2_kernel: SaabKernel  # 4x4
    channel_pca: list        # 63 bases (or None after pruning), hop2 channels first
    n_components: int
    pca_counts: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.pca_counts is None:
            self.pca_counts = np.array(
                [0 if b is None else b.n_components for b in self.channel_pca], dtype=np.int64
            )

    @property
    def feature_length(self) -> int:
        return int(self.pca_counts.sum()) + N_CHANNELS


def _cuboid_patches(cuboids: np.ndarray) -> np.ndarray:
    n, h, w, c = cuboids.shape
    s = h // HOP_PATCH
    blocks = cuboids.reshape(n, s, HOP_PATCH, w // HOP_PATCH, HOP_PATCH, c)
    return np.moveaxis(blocks, 2, 3).reshape(n * s * (w // HOP_PATCH), HOP_PATCH * HOP_PATCH * c)


def _plane_patches(maps: np.ndarray, crop_to: int) -> np.ndarray:
    cropped = center_crop_to_multiple(maps, HOP_PATCH) if maps.shape[-1] != crop_to else maps
    n, h, w = cropped.shape
    s = h // HOP_PATCH
    blocks = cropped.reshape(n, s, HOP_PATCH, s, HOP_PATCH)
    return np.moveaxis(blocks, 2, 3).reshape(n * s * s, HOP_PATCH * HOP_PATCH)


def _pooled_acs(hop1_out: np.ndarray) -> np.ndarray:
    acs = hop1_out[:, 1:]
    if acs.shape[-1] % AC_POOL:
        acs = center_crop_to_multiple(acs, AC_POOL)
    return abs_max_pool(acs, AC_POOL)


class SpatioColorFitter:
    """Three-sweep streaming fitter: hop1 moments from raw cuboids, hop2 and
    AC-channel moments from a second pass, hop2-channel moments from the
    cached hop1 DC maps."""

    def __init__(self, side: int, n_components: int = DEFAULT_COMPONENTS):
        self.geometry = SpatioColorGeometry.for_side(side)
        self.n_components = min(n_components, self.geometry.entries)
        self.count = 0
        self._hop1_acc = CovAccumulator(HOP_PATCH * HOP_PATCH * 3)
        self._hop2_acc = CovAccumulator(HOP_PATCH * HOP_PATCH)
        self._ac_accs = [CovAccumulator(self.geometry.entries) for _ in range(47)]
        self._dc_accs = [CovAccumulator(self.geometry.entries) for _ in range(16)]
        self.hop1_kernel = None
        self.hop2_kernel = None

    def sweep1(self, cuboids: np.ndarray) -> None:
        g = self.geometry
        if cuboids.shape[1:] != (g.side, g.side, 3):
            raise GeometryError(f"expected (N, {g.side}, {g.side}, 3) cuboids, got {cuboids.shape}")
        self.count += cuboids.shape[0]
        patches = _cuboid_patches(cuboids)
        self._hop1_acc.add(patches - patches.mean(axis=1, keepdims=True))

    def finish_sweep1(self) -> None:
        if self.count < MIN_FIT_CUBOIDS:
            raise FitError(f"need at least {MIN_FIT_CUBOIDS} cuboids, have {self.count}")
        self.hop1_kernel = fit_saab_from_moments(self._hop1_acc, (HOP_PATCH, HOP_PATCH, 3))

    def sweep2(self, cuboids: np.ndarray) -> np.ndarray:
        """Accumulate hop2 patches and pooled-AC channel moments; returns the
        hop1 DC maps for sweep 3."""
        if self.hop1_kernel is None:
            raise FitError("finish_sweep1() must run before sweep 2")
        hop1_out = apply_saab_batch(self.hop1_kernel, cuboids)
        patches = _plane_patches(hop1_out[:, 0], self.geometry.hop2_in)
        self._hop2_acc.add(patches - patches.mean(axis=1, keepdims=True))
        pooled = _pooled_acs(hop1_out).reshape(cuboids.shape[0], 47, -1)
        for c in range(47):
            self._ac_accs[c].add(pooled[:, c])
        return hop1_out[:, 0]

    def finish_sweep2(self) -> None:
        self.hop2_kernel = fit_saab_from_moments(self._hop2_acc, (HOP_PATCH, HOP_PATCH))

    def sweep3(self, dc_maps: np.ndarray) -> None:
        if self.hop2_kernel is None:
            raise FitError("finish_sweep2() must run before sweep 3")
        g = self.geometry
        cropped = center_crop_to_multiple(dc_maps, HOP_PATCH) if g.hop1_side != g.hop2_in else dc_maps
        hop2_out = apply_saab_batch(self.hop2_kernel, cropped).reshape(dc_maps.shape[0], 16, -1)
        for c in range(16):
            self._dc_accs[c].add(hop2_out[:, c])

    def finish(self) -> SpatioColorModel:
        bases = [pca_fit_from_moments(a, self.n_components) for a in self._dc_accs]
        bases += [pca_fit_from_moments(a, self.n_components) for a in self._ac_accs]
        return SpatioColorModel(
            geometry=self.geometry,
            hop1_kernel=self.hop1_kernel,
            hop2_kernel=self.hop2_kernel,
            channel_pca=bases,
            n_components=self.n_components,
        )


def fit_spatiocolor(cuboids: np.ndarray, n_components: int = DEFAULT_COMPONENTS) -> SpatioColorModel:
    """Fit on a stack of RGB cuboids (N, S, S, 3)."""
    cuboids = np.asarray(cuboids, dtype=np.float64)
    if cuboids.ndim != 4:
        raise GeometryError(f"expected (N, S, S, 3) cuboids, got {cuboids.shape}")
    fitter = SpatioColorFitter(cuboids.shape[1], n_components)
    fitter.sweep1(cuboids)
    fitter.finish_sweep1()
    dc = fitter.sweep2(cuboids)
    fitter.finish_sweep2()
    fitter.sweep3(dc)
    return fitter.finish()


def final_channels(model: SpatioColorModel, cuboids: np.ndarray) -> np.ndarray:
    """The 63 equally sized channel maps, flattened: (N, 63, entries)."""
    g = model.geometry
    cuboids = np.asarray(cuboids, dtype=np.float64)
    if cuboids.shape[1:] != (g.side, g.side, 3):
        raise GeometryError(f"expected (N, {g.side}, {g.side}, 3) cuboids, got {cuboids.shape}")
    n = cuboids.shape[0]
    hop1_out = apply_saab_batch(model.hop1_kernel, cuboids)
    dc = hop1_out[:, 0]
    dc = center_crop_to_multiple(dc, HOP_PATCH) if g.hop1_side != g.hop2_in else dc
    hop2_out = apply_saab_batch(model.hop2_kernel, dc).reshape(n, 16, -1)
    pooled = _pooled_acs(hop1_out).reshape(n, 47, -1)
    return np.concatenate([hop2_out, pooled], axis=1)


def extract_spatiocolor_batch(model: SpatioColorModel, cuboids: np.ndarray) -> np.ndarray:
    """Feature matrix (N, L): per-channel PCA projections then 63 stds."""
    channels = final_channels(model, cuboids)
    n = channels.shape[0]
    cols = []
    for c, basis in enumerate(model.channel_pca):
        if basis is not None:
            cols.append(channels[:, c] @ basis.components.T - basis.offset)
    cols.append(channels.std(axis=2))
    return np.concatenate(cols, axis=1)


def extract_spatiocolor(model: SpatioColorModel, cuboid: np.ndarray) -> np.ndarray:
    return extract_spatiocolor_batch(model, np.asarray(cuboid, dtype=np.float64)[None])[0]


def prune_spatiocolor(model: SpatioColorModel, keep: np.ndarray):
    """Drop PCA component rows not named in `keep` (indices into this
    model's feature vector). Returns (pruned model, old->new index map)."""
    pca_total = int(model.pca_counts.sum())
    keep = np.asarray(keep, dtype=np.int64)
    wanted = set(int(i) for i in keep if i < pca_total)
    bases = []
    index_map = {}
    old_pos = 0
    new_pos = 0
    for basis, count in zip(model.channel_pca, model.pca_counts):
        rows = [r for r in range(count) if old_pos + r in wanted]
        if rows:
            bases.append(
                PcaBasis(
                    mean=basis.mean,
                    components=basis.components[rows],
                    explained_variance=basis.explained_variance[rows],
                    offset=basis.offset[rows],
                )
            )
            for r in rows:
                index_map[old_pos + r] = new_pos
                new_pos += 1
        else:
            bases.append(None)
        old_pos += count
    for s in range(N_CHANNELS):  # std block is always kept
        index_map[pca_total + s] = new_pos + s
    pruned = SpatioColorModel(
        geometry=model.geometry,
        hop1_kernel=model.hop1_kernel,
        hop2_kernel=model.hop2_kernel,
        channel_pca=bases,
        n_components=model.n_components,
        pca_counts=None,
    )
    return pruned, index_map
