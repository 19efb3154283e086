"""Unsupervised transform primitives: 8x8 block DCT with zigzag channels,
learned Saab transforms (2D and 3D patches), PCA, and absolute-max pooling.

All fits are deterministic: eigendecompositions use a fixed sign convention
(largest-magnitude element of each component made positive) so refits on the
same data reproduce the same kernels bit for bit.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import FitError, GeometryError


def _zigzag_order(n: int = 8) -> np.ndarray:
    """(row, col) pairs of an n x n grid in JPEG zigzag order."""
    order = []
    for s in range(2 * n - 1):
        if s % 2 == 0:
            rows = range(min(s, n - 1), max(-1, s - n), -1)
        else:
            rows = range(max(0, s - n + 1), min(s, n - 1) + 1)
        order.extend((r, s - r) for r in rows)
    return np.array(order, dtype=np.int64)

ZIGZAG_8 = _zigzag_order(8)


def _dct_matrix(n: int = 8) -> np.ndarray:
    """Orthonormal type-II DCT matrix (rows are basis functions)."""
    k = np.arange(n)[:, None]
    x = np.arange(n)[None, :]
    mat = np.cos(np.pi * (2 * x + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    mat[0] /= np.sqrt(2.0)
    return mat

DCT_8 = _dct_matrix(8)


@dataclass
class ChannelMaps:
    """Ordered stack of equally sized 2D coefficient maps, shape (C, H, W)."""

    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 3:
            raise GeometryError(f"channel stack must be 3D, got shape {self.data.shape}")

    @property
    def channel_count(self) -> int:
        return self.data.shape[0]

    @property
    def spatial_h(self) -> int:
        return self.data.shape[1]

    @property
    def spatial_w(self) -> int:
        return self.data.shape[2]

    def channel(self, i: int) -> np.ndarray:
        return self.data[i]


def block_dct_8x8_batch(planes: np.ndarray) -> np.ndarray:
    """Block 8x8 DCT of a batch of planes (N, S, S) -> (N, 64, S/8, S/8).

    Channel order follows the zigzag scan: channel 0 is DC, channels 1..63
    are AC1..AC63.
    """
    n, h, w = planes.shape
    if h % 8 or w % 8:
        raise GeometryError(f"plane dims {h}x{w} not divisible by 8")
    bh, bw = h // 8, w // 8
    blocks = planes.reshape(n, bh, 8, bw, 8)
    coef = np.einsum("ui,naibj,vj->nabuv", DCT_8, blocks, DCT_8, optimize=True)
    zz = coef[:, :, :, ZIGZAG_8[:, 0], ZIGZAG_8[:, 1]]  # (n, bh, bw, 64)
    return np.ascontiguousarray(np.moveaxis(zz, 3, 1))


def block_dct_8x8(plane: np.ndarray) -> ChannelMaps:
    """Single-plane block DCT; see :func:`block_dct_8x8_batch`."""
    return ChannelMaps(block_dct_8x8_batch(plane[None])[0])


def inverse_block_dct_8x8(maps: ChannelMaps) -> np.ndarray:
    """Reassemble a plane from zigzag channel maps. Test and data-synthesis support."""
    c, bh, bw = maps.data.shape
    if c != 64:
        raise GeometryError(f"expected 64 channels, got {c}")
    coef = np.zeros((bh, bw, 8, 8))
    coef[:, :, ZIGZAG_8[:, 0], ZIGZAG_8[:, 1]] = np.moveaxis(maps.data, 0, 2)
    blocks = np.einsum("iu,abuv,jv->aibj", DCT_8.T, coef, DCT_8.T, optimize=True)
    return blocks.reshape(bh * 8, bw * 8)


class CovAccumulator:
    """Streaming mean/covariance accumulator for vectors of fixed dimension.

    Lets Saab and PCA fits run over datasets too large to hold the raw
    sample matrix in memory.
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.count = 0
        self.sum = np.zeros(dim)
        self.sumsq = np.zeros((dim, dim))

    def add(self, rows: np.ndarray) -> None:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim != 2 or rows.shape[1] != self.dim:
            raise GeometryError(f"expected rows of dim {self.dim}, got {rows.shape}")
        self.count += rows.shape[0]
        self.sum += rows.sum(axis=0)
        self.sumsq += rows.T @ rows

    def mean_cov(self):
        if self.count < 2:
            raise FitError(f"need at least 2 samples, have {self.count}")
        mean = self.sum / self.count
        cov = (self.sumsq - self.count * np.outer(mean, mean)) / (self.count - 1)
        return mean, cov


def _signed_eigh(cov: np.ndarray):
    """Eigendecomposition sorted by descending eigenvalue with a fixed sign rule.

    Each eigenvector's largest-magnitude element is made positive; np.argmax
    breaks magnitude ties toward the lowest index.
    """
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(-vals, kind="stable")
    vals = vals[order]
    vecs = vecs[:, order].T  # rows are components
    for row in vecs:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    return vals, vecs


@dataclass
class SaabKernel:
    """Learned local transform: constant DC kernel plus PCA-derived AC kernels.

    Rows of ``[dc_kernel; ac_kernels]`` form an orthonormal basis of the
    flattened patch space. ``bias`` is fixed at zero here (no nonlinearity
    between hops) and kept only as part of the kernel contract.
    """

    patch_shape: tuple
    dc_kernel: np.ndarray
    ac_kernels: np.ndarray
    energy: np.ndarray
    bias: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.bias is None:
            self.bias = np.zeros(self.n_kernels)

    @property
    def patch_volume(self) -> int:
        return int(np.prod(self.patch_shape))

    @property
    def n_kernels(self) -> int:
        return self.patch_volume

    @property
    def matrix(self) -> np.ndarray:
        """Full (n, n) kernel matrix, DC row first."""
        return np.vstack([self.dc_kernel[None, :], self.ac_kernels])


def fit_saab_from_moments(acc: CovAccumulator, patch_shape) -> SaabKernel:
    """Derive a Saab kernel from accumulated moments of mean-removed patches."""
    n = int(np.prod(patch_shape))
    if acc.dim != n:
        raise GeometryError(f"accumulator dim {acc.dim} != patch volume {n}")
    if acc.count < n + 1:
        raise FitError(f"need at least {n + 1} patches, have {acc.count}")
    mean, cov = acc.mean_cov()
    total_var = np.trace(cov)
    if total_var <= 1e-12:
        raise FitError("degenerate patches: no variance after mean removal")
    vals, vecs = _signed_eigh(cov)
    dc = np.full(n, 1.0 / np.sqrt(n))
    # drop the near-null component along the DC direction
    ac = vecs[: n - 1]
    ac_energy = np.maximum(vals[: n - 1], 0.0)
    energy = np.concatenate([[total_var], ac_energy])
    return SaabKernel(patch_shape=tuple(patch_shape), dc_kernel=dc, ac_kernels=ac, energy=energy)


def remove_patch_means(patches: np.ndarray) -> np.ndarray:
    return patches - patches.mean(axis=1, keepdims=True)


def fit_saab(patches: np.ndarray, patch_shape) -> SaabKernel:
    """Fit a Saab kernel on flattened patches (rows).

    The DC kernel is the constant unit vector; AC kernels are principal
    components of the per-patch mean-removed samples, ordered by decreasing
    explained variance.
    """
    patches = np.asarray(patches, dtype=np.float64)
    n = int(np.prod(patch_shape))
    if patches.ndim != 2 or patches.shape[1] != n:
        raise GeometryError(f"patches must be (m, {n}), got {patches.shape}")
    acc = CovAccumulator(n)
    acc.add(remove_patch_means(patches))
    return fit_saab_from_moments(acc, patch_shape)


def apply_saab_batch(kernel: SaabKernel, maps: np.ndarray) -> np.ndarray:
    """Apply a Saab kernel to a batch of inputs.

    2D kernels take (N, H, W); 3D kernels take (N, H, W, C). The output is
    (N, n_kernels, H/ph, W/pw) with channel 0 the DC projection and channels
    1..n-1 the AC projections in energy order.
    """
    shape = kernel.patch_shape
    if len(shape) == 2:
        ph, pw = shape
        n, h, w = maps.shape
        if h % ph or w % pw:
            raise GeometryError(f"spatial dims {h}x{w} not divisible by patch {ph}x{pw}")
        patches = maps.reshape(n, h // ph, ph, w // pw, pw)
        patches = np.moveaxis(patches, 2, 3).reshape(n, (h // ph) * (w // pw), ph * pw)
        oh, ow = h // ph, w // pw
    else:
        ph, pw, pc = shape
        n, h, w, c = maps.shape
        if c != pc:
            raise GeometryError(f"input has {c} channels, kernel expects {pc}")
        if h % ph or w % pw:
            raise GeometryError(f"spatial dims {h}x{w} not divisible by patch {ph}x{pw}")
        patches = maps.reshape(n, h // ph, ph, w // pw, pw, pc)
        patches = np.moveaxis(patches, 2, 3).reshape(n, (h // ph) * (w // pw), ph * pw * pc)
        oh, ow = h // ph, w // pw
    out = patches @ kernel.matrix.T  # (n, oh*ow, k)
    return np.ascontiguousarray(np.moveaxis(out, 2, 1).reshape(n, kernel.n_kernels, oh, ow))


def apply_saab(kernel: SaabKernel, maps: ChannelMaps) -> ChannelMaps:
    """Single-input Saab application over non-overlapping patches."""
    if len(kernel.patch_shape) == 2:
        if maps.channel_count != 1:
            raise GeometryError("2D Saab expects a single input channel")
        return ChannelMaps(apply_saab_batch(kernel, maps.data)[0])
    if maps.channel_count != kernel.patch_shape[2]:
        raise GeometryError(
            f"3D Saab expects {kernel.patch_shape[2]} channels, got {maps.channel_count}"
        )
    cuboid = np.moveaxis(maps.data, 0, 2)[None]
    return ChannelMaps(apply_saab_batch(kernel, cuboid)[0])


def abs_max_pool(arr: np.ndarray, k: int) -> np.ndarray:
    """Max of |arr| over non-overlapping k x k windows. Works on (..., H, W)."""
    h, w = arr.shape[-2:]
    if h % k or w % k:
        raise GeometryError(f"dims {h}x{w} not divisible by pool size {k}")
    shaped = np.abs(arr).reshape(*arr.shape[:-2], h // k, k, w // k, k)
    return shaped.max(axis=(-3, -1))


def center_crop_to_multiple(arr: np.ndarray, m: int) -> np.ndarray:
    """Center-crop the trailing two dims to the largest multiple of m."""
    h, w = arr.shape[-2:]
    nh, nw = (h // m) * m, (w // m) * m
    if nh == 0 or nw == 0:
        raise GeometryError(f"dims {h}x{w} too small to crop to a multiple of {m}")
    oy, ox = (h - nh) // 2, (w - nw) // 2
    return arr[..., oy : oy + nh, ox : ox + nw]


@dataclass
class PcaBasis:
    """Mean vector plus top-k orthonormal components of the sample covariance."""

    mean: np.ndarray
    components: np.ndarray  # (k, n)
    explained_variance: np.ndarray
    # components @ mean, cached so projections reduce to a single matmul
    offset: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.offset is None:
            self.offset = self.components @ self.mean

    @property
    def n_components(self) -> int:
        return self.components.shape[0]


def pca_fit_from_moments(acc: CovAccumulator, k: int) -> PcaBasis:
    if k > acc.dim:
        raise FitError(f"k={k} exceeds dimension {acc.dim}")
    if acc.count < k + 1:
        raise FitError(f"need at least {k + 1} samples, have {acc.count}")
    mean, cov = acc.mean_cov()
    vals, vecs = _signed_eigh(cov)
    return PcaBasis(mean=mean, components=vecs[:k], explained_variance=np.maximum(vals[:k], 0.0))


def pca_fit(samples: np.ndarray, k: int) -> PcaBasis:
    """PCA by covariance eigendecomposition; components ordered by variance."""
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2:
        raise FitError(f"samples must be 2D, got shape {samples.shape}")
    acc = CovAccumulator(samples.shape[1])
    acc.add(samples)
    return pca_fit_from_moments(acc, k)


def pca_project(basis: PcaBasis, vec: np.ndarray) -> np.ndarray:
    """Project vector(s) onto the basis after mean removal."""
    vec = np.asarray(vec, dtype=np.float64)
    return vec @ basis.components.T - basis.offset
