"""Image ingestion: decoding, BT.601 full-range color conversion, and the
random cropping used to standardize input size and multiply training samples.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import DecodeError, GeometryError, UnsupportedFormatError

# BT.601 full-range, derived analytically from Kr/Kb so the forward and
# inverse matrices are exact inverses of each other.
_KR, _KB = 0.299, 0.114
_KG = 1.0 - _KR - _KB
RGB_TO_YUV = np.array(
    [
        [_KR, _KG, _KB],
        [-0.5 * _KR / (1 - _KB), -0.5 * _KG / (1 - _KB), 0.5],
        [0.5, -0.5 * _KG / (1 - _KR), -0.5 * _KB / (1 - _KR)],
    ]
)
YUV_TO_RGB = np.linalg.inv(RGB_TO_YUV)

_ACCEPTED_MODES = {"RGB", "RGBA", "L", "LA", "P", "1", "CMYK"}


@dataclass
class PlanarImage:
    """Decoded image with full-resolution Y/U/V planes in [0, 255]."""

    height: int
    width: int
    y_plane: np.ndarray
    u_plane: np.ndarray
    v_plane: np.ndarray
    source_id: str
    mos: Optional[float] = None

    def planes(self) -> np.ndarray:
        return np.stack([self.y_plane, self.u_plane, self.v_plane])


@dataclass
class SubImage:
    """Fixed-size crop of a parent image, inheriting the parent's score."""

    y_plane: np.ndarray
    u_plane: np.ndarray
    v_plane: np.ndarray
    side: int
    parent_id: str
    inherited_mos: Optional[float] = None
    offset: tuple = (0, 0)

    def planes(self) -> np.ndarray:
        return np.stack([self.y_plane, self.u_plane, self.v_plane])


def rgb_to_yuv(rgb: np.ndarray) -> np.ndarray:
    """(..., 3) RGB in [0,255] -> YUV with chroma centered at 128."""
    yuv = rgb @ RGB_TO_YUV.T
    yuv[..., 1] += 128.0
    yuv[..., 2] += 128.0
    return yuv


def yuv_to_rgb_array(yuv: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rgb_to_yuv`, clamped to [0, 255]."""
    shifted = yuv.astype(np.float64).copy()
    shifted[..., 1] -= 128.0
    shifted[..., 2] -= 128.0
    rgb = shifted @ YUV_TO_RGB.T
    return np.clip(rgb, 0.0, 255.0)


def decode(path, source_id: Optional[str] = None) -> PlanarImage:
    """Decode an 8-bit raster file into YUV planes.

    Raises DecodeError for unreadable files and UnsupportedFormatError for
    bit depths beyond 8 bits per channel.
    """
    try:
        with Image.open(path) as im:
            if im.mode not in _ACCEPTED_MODES:
                raise UnsupportedFormatError(
                    f"{path}: unsupported image mode {im.mode!r} (8-bit input required)"
                )
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64)
    except UnsupportedFormatError:
        raise
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc
    yuv = rgb_to_yuv(rgb)
    h, w = yuv.shape[:2]
    return PlanarImage(
        height=h,
        width=w,
        y_plane=np.ascontiguousarray(yuv[..., 0]),
        u_plane=np.ascontiguousarray(yuv[..., 1]),
        v_plane=np.ascontiguousarray(yuv[..., 2]),
        source_id=source_id if source_id is not None else str(path),
    )


def crop_random(img: PlanarImage, count: int, side: int, seed: int) -> list:
    """Crop `count` sub-images of size side x side at seeded uniform offsets.

    Crops may overlap; the same (image, count, side, seed) always returns the
    same crops.
    """
    if side > img.height or side > img.width:
        raise GeometryError(
            f"crop side {side} exceeds image {img.height}x{img.width} ({img.source_id})"
        )
    rng = np.random.default_rng(seed)
    ys = rng.integers(0, img.height - side + 1, size=count)
    xs = rng.integers(0, img.width - side + 1, size=count)
    subs = []
    for y0, x0 in zip(ys, xs):
        y0, x0 = int(y0), int(x0)
        subs.append(
            SubImage(
                y_plane=img.y_plane[y0 : y0 + side, x0 : x0 + side].copy(),
                u_plane=img.u_plane[y0 : y0 + side, x0 : x0 + side].copy(),
                v_plane=img.v_plane[y0 : y0 + side, x0 : x0 + side].copy(),
                side=side,
                parent_id=img.source_id,
                inherited_mos=img.mos,
                offset=(y0, x0),
            )
        )
    return subs


def yuv_to_rgb(sub: SubImage) -> np.ndarray:
    """RGB cuboid (side, side, 3) of a sub-image, clamped to [0, 255]."""
    yuv = np.stack([sub.y_plane, sub.u_plane, sub.v_plane], axis=-1)
    return yuv_to_rgb_array(yuv)
