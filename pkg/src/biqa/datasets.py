"""Dataset ingestion and desk-scale data synthesis.

A unified CSV manifest (image,mos[,reference,dist_type,dist_level]) abstracts
the on-disk layouts of the public IQA datasets. The mini-dataset generator
produces a fully labeled 4-distortion corpus from pristine seed images so the
whole pipeline can be exercised without downloads.
"""

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

from .errors import ManifestError, ManifestParseError, SplitError
from .images import rgb_to_yuv, yuv_to_rgb_array
from .transforms import ZIGZAG_8, block_dct_8x8_batch, inverse_block_dct_8x8
from .transforms import ChannelMaps


@dataclass
class DatasetRecord:
    image_path: str
    image_id: str
    mos: float
    reference_id: Optional[str] = None
    distortion_type: Optional[int] = None
    distortion_level: Optional[int] = None


@dataclass
class SplitPlan:
    train: list
    val: list
    test: list
    seed: int
    policy: str

    def parts(self):
        return {"train": self.train, "val": self.val, "test": self.test}


def load_manifest(csv_path, images_dir, scenario: str) -> list:
    """Parse a manifest CSV and verify every referenced image exists.

    scenario='synthetic' requires reference and dist_type columns;
    scenario='authentic' ignores them even when present.
    """
    csv_path = Path(csv_path)
    images_dir = Path(images_dir)
    if not csv_path.exists():
        raise ManifestError(f"manifest not found: {csv_path}")
    records = []
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "image" not in reader.fieldnames or "mos" not in reader.fieldnames:
            raise ManifestError(f"{csv_path}: manifest needs at least 'image' and 'mos' columns")
        for row in reader:
            line_no = reader.line_num
            image = (row.get("image") or "").strip()
            if not image:
                raise ManifestParseError(f"{csv_path}:{line_no}: empty image field", line_no)
            try:
                mos = float(row["mos"])
            except (TypeError, ValueError):
                raise ManifestParseError(
                    f"{csv_path}:{line_no}: bad mos value {row.get('mos')!r}", line_no
                ) from None
            reference = (row.get("reference") or "").strip() or None
            dist_type = (row.get("dist_type") or "").strip() or None
            dist_level = (row.get("dist_level") or "").strip() or None
            if scenario == "synthetic":
                if reference is None or dist_type is None:
                    raise ManifestParseError(
                        f"{csv_path}:{line_no}: synthetic records need reference and dist_type", line_no
                    )
                try:
                    dist_type = int(dist_type)
                    dist_level = int(dist_level) if dist_level is not None else None
                except ValueError:
                    raise ManifestParseError(
                        f"{csv_path}:{line_no}: dist_type/dist_level must be integers", line_no
                    ) from None
            else:
                reference, dist_type, dist_level = None, None, None
            records.append(
                DatasetRecord(
                    image_path=str(images_dir / image),
                    image_id=image,
                    mos=mos,
                    reference_id=reference,
                    distortion_type=dist_type,
                    distortion_level=dist_level,
                )
            )
    if not records:
        raise ManifestError(f"{csv_path}: manifest is empty")
    missing = [r.image_path for r in records if not os.path.exists(r.image_path)]
    if missing:
        shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
        raise ManifestError(f"{len(missing)} manifest images missing: {shown}")
    return records


def split(records, ratios=(0.8, 0.0, 0.2), policy: str = "by_image", seed: int = 0) -> SplitPlan:
    """Partition records into train/val/test id lists.

    by_reference keeps all images of a reference in one part. Test and val
    sizes are floored; the remainder goes to train.
    """
    if policy not in ("by_image", "by_reference"):
        raise SplitError(f"unknown split policy {policy!r}")
    r_train, r_val, r_test = ratios
    if abs(r_train + r_val + r_test - 1.0) > 1e-9:
        raise SplitError(f"ratios must sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    if policy == "by_reference":
        if any(r.reference_id is None for r in records):
            raise SplitError("by_reference split needs reference ids on every record")
        seen = {}
        for r in records:
            seen.setdefault(r.reference_id, []).append(r.image_id)
        keys = list(seen.keys())
        units = [seen[k] for k in keys]
    else:
        keys = [r.image_id for r in records]
        units = [[r.image_id] for r in records]
    n = len(keys)
    order = rng.permutation(n)
    n_test = int(n * r_test)
    n_val = int(n * r_val)
    test_u = order[:n_test]
    val_u = order[n_test : n_test + n_val]
    train_u = order[n_test + n_val :]
    plan = SplitPlan(
        train=[i for u in train_u for i in units[u]],
        val=[i for u in val_u for i in units[u]],
        test=[i for u in test_u for i in units[u]],
        seed=seed,
        policy=policy,
    )
    for name, part, ratio in (("train", plan.train, r_train), ("val", plan.val, r_val), ("test", plan.test, r_test)):
        if ratio > 0 and not part:
            raise SplitError(f"{name} part is empty (n={n}, ratios={ratios})")
    return plan


def select_records(records, ids) -> list:
    by_id = {r.image_id: r for r in records}
    return [by_id[i] for i in ids]


# ---------------------------------------------------------------------------
# synthetic mini-dataset

JPEG_LUMA_TABLE = np.array(
    [
        [16, 11, 10, 16, 24, 40, 51, 61],
        [12, 12, 14, 19, 26, 58, 60, 55],
        [14, 13, 16, 24, 40, 57, 69, 56],
        [14, 17, 22, 29, 51, 87, 80, 62],
        [18, 22, 37, 56, 68, 109, 103, 77],
        [24, 35, 55, 64, 81, 104, 113, 92],
        [49, 64, 78, 87, 103, 121, 120, 101],
        [72, 92, 95, 98, 112, 100, 103, 99],
    ],
    dtype=np.float64,
)

BLUR_SIGMAS = (1.0, 2.0, 4.0, 8.0)
NOISE_SIGMAS = (5.0, 15.0, 30.0, 50.0)
CONTRAST_SCALES = (0.8, 0.6, 0.4, 0.2)
JPEG_QUALITIES = (80, 50, 25, 10)
DISTORTION_NAMES = ("blur", "noise", "contrast", "jpeg")


def _quant_table(quality: int) -> np.ndarray:
    s = 5000.0 / quality if quality < 50 else 200.0 - 2.0 * quality
    t = np.floor((s * JPEG_LUMA_TABLE + 50.0) / 100.0)
    return np.clip(t, 1.0, 255.0)


def _jpeg_like(rgb: np.ndarray, quality: int) -> np.ndarray:
    """8x8 DCT quantization of the YUV planes with a quality-scaled table."""
    h, w = rgb.shape[:2]
    h8, w8 = (h // 8) * 8, (w // 8) * 8
    yuv = rgb_to_yuv(rgb[:h8, :w8].astype(np.float64))
    table = _quant_table(quality)[ZIGZAG_8[:, 0], ZIGZAG_8[:, 1]]
    out = np.empty_like(yuv)
    for c in range(3):
        coef = block_dct_8x8_batch((yuv[..., c] - 128.0)[None])[0]
        coef = np.round(coef / table[:, None, None]) * table[:, None, None]
        out[..., c] = inverse_block_dct_8x8(ChannelMaps(coef)) + 128.0
    rec = rgb.astype(np.float64).copy()
    rec[:h8, :w8] = yuv_to_rgb_array(out)
    return rec


def distort(rgb: np.ndarray, dist_type: int, level: int, rng) -> np.ndarray:
    """Apply one of the four distortion types at level 1..4 (worst)."""
    x = rgb.astype(np.float64)
    if dist_type == 0:
        out = np.stack([gaussian_filter(x[..., c], BLUR_SIGMAS[level - 1], mode="nearest") for c in range(3)], axis=-1)
    elif dist_type == 1:
        out = x + rng.normal(0.0, NOISE_SIGMAS[level - 1], size=x.shape)
    elif dist_type == 2:
        out = 128.0 + CONTRAST_SCALES[level - 1] * (x - 128.0)
    elif dist_type == 3:
        out = _jpeg_like(x, JPEG_QUALITIES[level - 1])
    else:
        raise ValueError(f"unknown distortion type {dist_type}")
    return np.clip(np.round(out), 0, 255).astype(np.uint8)


def make_pristine_seeds(count: int, side: int = 256, seed: int = 0):
    """Procedural pristine images: smooth gradients, band-limited texture,
    and geometric structure, so every distortion type measurably degrades
    them. Returns a list of (name, rgb uint8 array)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:side, 0:side] / side
    out = []
    for i in range(count):
        img = np.zeros((side, side, 3))
        base = rng.uniform(60, 190, size=3)
        gx, gy = rng.uniform(-60, 60, size=(2, 3))
        img += base + gx * (xx[..., None] - 0.5) + gy * (yy[..., None] - 0.5)
        # band-limited texture shared across channels plus per-channel grain
        texture = gaussian_filter(rng.normal(0, 1, (side, side)), rng.uniform(1.0, 3.0))
        texture *= rng.uniform(25, 60) / max(texture.std(), 1e-9)
        img += texture[..., None]
        grain = rng.normal(0, rng.uniform(2, 6), (side, side, 3))
        img += gaussian_filter(grain, (0.8, 0.8, 0))
        for _ in range(rng.integers(6, 14)):
            cy, cx = rng.uniform(0, side, 2)
            ry, rx = rng.uniform(side * 0.03, side * 0.25, 2)
            mask = ((yy * side - cy) / ry) ** 2 + ((xx * side - cx) / rx) ** 2 < 1.0
            color = rng.uniform(20, 235, 3)
            alpha = rng.uniform(0.4, 0.9)
            img[mask] = (1 - alpha) * img[mask] + alpha * color
        freq = rng.uniform(4, 18)
        phase = rng.uniform(0, 2 * np.pi)
        ripple = np.sin(2 * np.pi * freq * (xx * rng.uniform(-1, 1) + yy * rng.uniform(-1, 1)) + phase)
        img += rng.uniform(4, 12) * ripple[..., None]
        out.append((f"seed{i:02d}", np.clip(np.round(img), 0, 255).astype(np.uint8)))
    return out


def synth_minidataset(seed_images, out_dir, seed: int = 0) -> Path:
    """Write the labeled mini-dataset and return the manifest path.

    seed_images: list of (name, rgb uint8 array) or image paths, at least 8
    pristine images of at least 256x256. Each gets 4 distortion types at 4
    levels with pseudo-MOS 5 - level.
    """
    seeds = []
    for item in seed_images:
        if isinstance(item, (str, Path)):
            name = Path(item).stem
            with Image.open(item) as im:
                arr = np.asarray(im.convert("RGB"))
            seeds.append((name, arr))
        else:
            seeds.append(item)
    if len(seeds) < 8:
        raise ManifestError(f"need at least 8 seed images, got {len(seeds)}")
    for name, arr in seeds:
        if arr.shape[0] < 256 or arr.shape[1] < 256:
            raise ManifestError(f"seed {name} is {arr.shape[1]}x{arr.shape[0]}, need at least 256x256")
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    try:
        images_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ManifestError(f"cannot create {images_dir}: {exc}") from exc
    rng = np.random.default_rng(seed)
    manifest_path = out_dir / "manifest.csv"
    try:
        fh = open(manifest_path, "w", newline="")
    except OSError as exc:
        raise ManifestError(f"cannot write {manifest_path}: {exc}") from exc
    with fh:
        writer = csv.writer(fh)
        writer.writerow(["image", "mos", "reference", "dist_type", "dist_level"])
        for name, arr in seeds:
            for dist_type in range(4):
                for level in range(1, 5):
                    fname = f"{name}_{DISTORTION_NAMES[dist_type]}_l{level}.png"
                    distorted = distort(arr, dist_type, level, rng)
                    Image.fromarray(distorted).save(images_dir / fname)
                    writer.writerow([f"images/{fname}", float(5 - level), name, dist_type, level])
    return manifest_path
