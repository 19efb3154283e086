"""End-to-end orchestration: train the full predictor, run batched inference
with the median decision ensemble, and serialize the whole thing.

Training canonicalizes record order and derives per-image crop seeds from the
image id, so any permutation of the same record set yields byte-identical
models. Serialization stores per-channel PCA bases pruned down to the
component rows the selected features actually use; inference always runs
through these pruned extractors, so a fresh model and its save/load round
trip predict bit-identically.
"""

import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import distortion, gbt, model_io, rft
from .errors import BiqaError, ConfigurationError, DataError, ModelCorruptionError, StageError
from .images import PlanarImage, crop_random, decode, yuv_to_rgb_array
from .spatial import SpatialFitter, extract_spatial_batch, prune_spatial
from .spatiocolor import SpatioColorFitter, extract_spatiocolor_batch, prune_spatiocolor

FORMAT_VERSION = model_io.FORMAT_VERSION


@dataclass
class CropConfig:
    train_count: int
    test_count: int
    side: int


def default_crop(scenario: str) -> CropConfig:
    if scenario == "synthetic":
        return CropConfig(train_count=25, test_count=25, side=32)
    return CropConfig(train_count=15, test_count=25, side=224)


@dataclass
class PipelineConfig:
    scenario: str
    crop: Optional[CropConfig] = None
    spatial_select: int = 2048
    spatiocolor_select: int = 2000
    spatial_pca_components: int = 8
    spatiocolor_components: Optional[int] = None  # 48 for authentic, else 16
    rft_bins: int = rft.DEFAULT_BINS
    cluster_count: int = 4
    merge_map: Optional[dict] = None
    gbt_params: gbt.GbtParams = field(default_factory=gbt.GbtParams)
    val_fraction: float = 0.1
    min_group_subimages: int = 20
    batch_images: int = 32

    def __post_init__(self):
        if self.scenario not in ("synthetic", "authentic"):
            raise ConfigurationError(f"scenario must be synthetic or authentic, got {self.scenario!r}")
        if self.crop is None:
            self.crop = default_crop(self.scenario)
        if self.spatiocolor_components is None:
            self.spatiocolor_components = 48 if self.scenario == "authentic" else 16
        if self.crop.side % 8 or self.crop.side < 32:
            raise ConfigurationError(f"crop side must be a multiple of 8 and >= 32, got {self.crop.side}")
        if not 0 < self.val_fraction < 1:
            raise ConfigurationError(f"val_fraction must be in (0, 1), got {self.val_fraction}")

    @property
    def authentic(self) -> bool:
        return self.scenario == "authentic"


@dataclass
class Prediction:
    image_id: str
    mos_pred: float
    per_sub_scores: np.ndarray
    group: object  # image-level id (synthetic) or per-sub ids (authentic)


@dataclass
class TrainedModel:
    scenario: str
    crop: CropConfig
    seed: int
    spatial_y: object
    spatial_u: object
    spatial_v: object
    spatial_gather: np.ndarray
    spatial_selected: np.ndarray
    spatiocolor: object
    spatiocolor_gather: Optional[np.ndarray]
    spatiocolor_selected: Optional[np.ndarray]
    router: distortion.DistortionRouter
    regressors: dict
    fallback_groups: list
    global_regressor: Optional[gbt.GbtModel]
    score_range: tuple
    format_version: int = FORMAT_VERSION

    @property
    def authentic(self) -> bool:
        return self.scenario == "authentic"


def _crop_seed(master: int, image_id: str) -> int:
    ss = np.random.SeedSequence([abs(int(master)), zlib.crc32(image_id.encode("utf-8"))])
    return int(ss.generate_state(1, np.uint64)[0])


def _derived_seed(master: int, tag: int) -> int:
    ss = np.random.SeedSequence([abs(int(master)), tag])
    return int(ss.generate_state(1, np.uint64)[0] >> 1)


def _batches(items, size):
    for i in range(0, len(items), size):
        yield items[i : i + size]


class _SubBatch:
    """Stacked planes and per-sub metadata for one batch of images."""

    def __init__(self, y, u, v, parent, mos, dist):
        self.y, self.u, self.v = y, u, v
        self.parent = parent
        self.mos = mos
        self.dist = dist

    @property
    def n_subs(self):
        return self.y.shape[0]

    def cuboids(self):
        return yuv_to_rgb_array(np.stack([self.y, self.u, self.v], axis=-1))


def _crop_records(records, count, side, master_seed) -> _SubBatch:
    ys, us, vs, parent, mos, dist = [], [], [], [], [], []
    for i, rec in enumerate(records):
        img = decode(rec.image_path, source_id=rec.image_id)
        img.mos = rec.mos
        for sub in crop_random(img, count, side, _crop_seed(master_seed, rec.image_id)):
            ys.append(sub.y_plane)
            us.append(sub.u_plane)
            vs.append(sub.v_plane)
            parent.append(i)
            mos.append(rec.mos)
            dist.append(-1 if rec.distortion_type is None else rec.distortion_type)
    return _SubBatch(
        np.stack(ys), np.stack(us), np.stack(vs),
        np.array(parent, dtype=np.int64), np.array(mos, dtype=np.float64),
        np.array(dist, dtype=np.int64),
    )


def _crop_image(img: PlanarImage, count, side, master_seed) -> _SubBatch:
    subs = crop_random(img, count, side, _crop_seed(master_seed, img.source_id))
    mos = img.mos if img.mos is not None else np.nan
    return _SubBatch(
        np.stack([s.y_plane for s in subs]),
        np.stack([s.u_plane for s in subs]),
        np.stack([s.v_plane for s in subs]),
        np.zeros(len(subs), dtype=np.int64),
        np.full(len(subs), mos),
        np.full(len(subs), -1, dtype=np.int64),
    )


def _lowlevel_batch(batch: _SubBatch) -> np.ndarray:
    rows = np.empty((batch.n_subs, distortion.LOWLEVEL_DIM))
    for i in range(batch.n_subs):
        rows[i] = distortion.lowlevel_features_planes(batch.y[i], batch.u[i], batch.v[i])
    return rows


class _FullFeatures:
    """Training-time (unpruned) feature matrices for a record list."""

    def __init__(self, xsp, xsc, low, mos, dist, parent, n_images):
        self.xsp = xsp
        self.xsc = xsc
        self.low = low
        self.mos = mos
        self.dist = dist
        self.parent = parent
        self.n_images = n_images


def _extract_full(records, cfg, seed, models, sc_model):
    my, mu, mv = models
    xsp, xsc, low, mos, dist, parent = [], [], [], [], [], []
    offset = 0
    for chunk in _batches(records, cfg.batch_images):
        batch = _crop_records(chunk, cfg.crop.train_count, cfg.crop.side, seed)
        feats = np.concatenate(
            [
                extract_spatial_batch(my, batch.y),
                extract_spatial_batch(mu, batch.u),
                extract_spatial_batch(mv, batch.v),
            ],
            axis=1,
        )
        xsp.append(feats.astype(np.float32))
        if cfg.authentic:
            xsc.append(extract_spatiocolor_batch(sc_model, batch.cuboids()).astype(np.float32))
            low.append(_lowlevel_batch(batch))
        mos.append(batch.mos)
        dist.append(batch.dist)
        parent.append(batch.parent + offset)
        offset += len(chunk)
    return _FullFeatures(
        xsp=np.concatenate(xsp),
        xsc=np.concatenate(xsc) if xsc else None,
        low=np.concatenate(low) if low else None,
        mos=np.concatenate(mos),
        dist=np.concatenate(dist),
        parent=np.concatenate(parent),
        n_images=offset,
    )


def _compile_spatial(models, selected):
    """Prune per-plane PCA bases to the selected dims and build the gather
    vector mapping RFT order onto the pruned concatenated feature vector."""
    lengths = [m.feature_length for m in models]
    offsets = np.cumsum([0] + lengths)
    per_plane = [[] for _ in models]
    for idx in selected:
        plane = int(np.searchsorted(offsets, idx, side="right")) - 1
        per_plane[plane].append(int(idx - offsets[plane]))
    pruned, maps = [], []
    for m, keep in zip(models, per_plane):
        p, imap = prune_spatial(m, np.array(keep, dtype=np.int64))
        pruned.append(p)
        maps.append(imap)
    new_offsets = np.cumsum([0] + [p.feature_length for p in pruned])
    gather = np.empty(len(selected), dtype=np.int64)
    for i, idx in enumerate(selected):
        plane = int(np.searchsorted(offsets, idx, side="right")) - 1
        gather[i] = new_offsets[plane] + maps[plane][int(idx - offsets[plane])]
    return pruned, gather


def _compile_spatiocolor(model, selected):
    pruned, imap = prune_spatiocolor(model, np.asarray(selected, dtype=np.int64))
    gather = np.array([imap[int(i)] for i in selected], dtype=np.int64)
    return pruned, gather


def train(records, config: PipelineConfig, seed: int = 0, diagnostics: Optional[dict] = None) -> TrainedModel:
    """Fit the whole pipeline on labeled records.

    Carves an image-wise validation split (for boosting early stops) off the
    given records; the caller owns the train/test split. Pass a dict as
    `diagnostics` to receive the RFT results (for cost-curve export).
    """
    cfg = config
    if not records:
        raise StageError("setup", DataError("no training records"))
    if cfg.scenario == "synthetic" and any(r.distortion_type is None for r in records):
        raise StageError("setup", DataError("synthetic training requires distortion labels"))

    recs = sorted(records, key=lambda r: r.image_id)
    rng = np.random.default_rng(_derived_seed(seed, 1))
    n_val = max(1, int(len(recs) * cfg.val_fraction)) if len(recs) >= 2 else 0
    if n_val >= len(recs):
        raise StageError("setup", DataError(f"{len(recs)} records cannot fit a validation split"))
    perm = rng.permutation(len(recs))
    val_recs = [recs[i] for i in sorted(perm[:n_val])]
    train_recs = [recs[i] for i in sorted(perm[n_val:])]

    # --- unsupervised representation fitting (streamed sweeps) ---
    try:
        side = cfg.crop.side
        fy = SpatialFitter(side, cfg.spatial_pca_components)
        fu = SpatialFitter(side, cfg.spatial_pca_components)
        fv = SpatialFitter(side, cfg.spatial_pca_components)
        sc_fit = SpatioColorFitter(side, cfg.spatiocolor_components) if cfg.authentic else None
        dc_cache = []
        for chunk in _batches(train_recs, cfg.batch_images):
            batch = _crop_records(chunk, cfg.crop.train_count, side, seed)
            dc_cache.append(
                (
                    fy.sweep1(batch.y).astype(np.float32),
                    fu.sweep1(batch.u).astype(np.float32),
                    fv.sweep1(batch.v).astype(np.float32),
                )
            )
            if sc_fit is not None:
                sc_fit.sweep1(batch.cuboids())
        for f in (fy, fu, fv):
            f.finish_sweep1()
        if sc_fit is not None:
            sc_fit.finish_sweep1()
        sc_dc_cache = []
        for i, chunk in enumerate(_batches(train_recs, cfg.batch_images)):
            dcy, dcu, dcv = dc_cache[i]
            fy.sweep2(dcy.astype(np.float64))
            fu.sweep2(dcu.astype(np.float64))
            fv.sweep2(dcv.astype(np.float64))
            if sc_fit is not None:
                batch = _crop_records(chunk, cfg.crop.train_count, side, seed)
                sc_dc_cache.append(sc_fit.sweep2(batch.cuboids()).astype(np.float32))
        model_y, model_u, model_v = fy.finish(), fu.finish(), fv.finish()
        sc_model = None
        if sc_fit is not None:
            sc_fit.finish_sweep2()
            for arr in sc_dc_cache:
                sc_fit.sweep3(arr.astype(np.float64))
            sc_model = sc_fit.finish()
        del dc_cache, sc_dc_cache
    except BiqaError as exc:
        if isinstance(exc, StageError):
            raise
        raise StageError("representation", exc) from exc

    # --- supervised feature selection ---
    try:
        tr = _extract_full(train_recs, cfg, seed, (model_y, model_u, model_v), sc_model)
        va = _extract_full(val_recs, cfg, seed, (model_y, model_u, model_v), sc_model)
        n_spatial = min(cfg.spatial_select, tr.xsp.shape[1])
        rft_sp = rft.select(tr.xsp, tr.mos, n_spatial, cfg.rft_bins)
        if diagnostics is not None:
            diagnostics["rft_spatial"] = rft_sp
        pruned_planes, gather_sp = _compile_spatial([model_y, model_u, model_v], rft_sp.selected)
        feats_tr = tr.xsp[:, rft_sp.selected].astype(np.float64)
        feats_va = va.xsp[:, rft_sp.selected].astype(np.float64)
        sel_sc = None
        pruned_sc, gather_sc = None, None
        if cfg.authentic:
            n_sc = min(cfg.spatiocolor_select, tr.xsc.shape[1])
            rft_sc = rft.select(tr.xsc, tr.mos, n_sc, cfg.rft_bins)
            if diagnostics is not None:
                diagnostics["rft_spatiocolor"] = rft_sc
            sel_sc = rft_sc.selected
            pruned_sc, gather_sc = _compile_spatiocolor(sc_model, sel_sc)
            feats_tr = np.concatenate([feats_tr, tr.xsc[:, sel_sc].astype(np.float64)], axis=1)
            feats_va = np.concatenate([feats_va, va.xsc[:, sel_sc].astype(np.float64)], axis=1)
    except BiqaError as exc:
        raise StageError("selection", exc) from exc

    # --- distortion routing ---
    try:
        n_sel_spatial = len(rft_sp.selected)
        if cfg.scenario == "synthetic":
            router = distortion.fit_router_synthetic(
                feats_tr[:, :n_sel_spatial],
                tr.dist,
                cfg.merge_map,
                replace(cfg.gbt_params, seed=_derived_seed(seed, 2)),
                feats_va[:, :n_sel_spatial],
                va.dist,
            )
            groups_tr = np.array([router.merged_label(t) for t in tr.dist])
            groups_va = np.array([router.merged_label(t) for t in va.dist])
        else:
            router = distortion.fit_router_authentic_from_features(
                tr.low, cfg.cluster_count, _derived_seed(seed, 3)
            )
            groups_tr = distortion.route(router, tr.low)
            groups_va = distortion.route(router, va.low)
    except BiqaError as exc:
        raise StageError("routing", exc) from exc

    # --- per-group regressors ---
    try:
        regressors = {}
        fallback_groups = []
        global_model = None
        for g in range(router.k):
            mask = groups_tr == g
            g_seed = _derived_seed(seed, 100 + g)
            if int(mask.sum()) < cfg.min_group_subimages:
                if global_model is None:
                    global_model = gbt.fit_regressor(
                        feats_tr, tr.mos, feats_va, va.mos, replace(cfg.gbt_params, seed=_derived_seed(seed, 99))
                    )
                regressors[g] = global_model
                fallback_groups.append(g)
                continue
            vmask = groups_va == g
            if vmask.any():
                vx, vy = feats_va[vmask], va.mos[vmask]
            else:
                vx, vy = feats_va, va.mos
            regressors[g] = gbt.fit_regressor(
                feats_tr[mask], tr.mos[mask], vx, vy, replace(cfg.gbt_params, seed=g_seed)
            )
    except BiqaError as exc:
        raise StageError("regression", exc) from exc

    all_mos = np.concatenate([tr.mos, va.mos])
    return TrainedModel(
        scenario=cfg.scenario,
        crop=replace(cfg.crop),
        seed=seed,
        spatial_y=pruned_planes[0],
        spatial_u=pruned_planes[1],
        spatial_v=pruned_planes[2],
        spatial_gather=gather_sp,
        spatial_selected=np.asarray(rft_sp.selected, dtype=np.int64),
        spatiocolor=pruned_sc,
        spatiocolor_gather=gather_sc,
        spatiocolor_selected=None if sel_sc is None else np.asarray(sel_sc, dtype=np.int64),
        router=router,
        regressors=regressors,
        fallback_groups=fallback_groups,
        global_regressor=global_model,
        score_range=(float(all_mos.min()), float(all_mos.max())),
    )


def _inference_features(model: TrainedModel, batch: _SubBatch):
    sp = np.concatenate(
        [
            extract_spatial_batch(model.spatial_y, batch.y),
            extract_spatial_batch(model.spatial_u, batch.u),
            extract_spatial_batch(model.spatial_v, batch.v),
        ],
        axis=1,
    )[:, model.spatial_gather]
    if not model.authentic:
        return sp, None
    sc = extract_spatiocolor_batch(model.spatiocolor, batch.cuboids())[:, model.spatiocolor_gather]
    return np.concatenate([sp, sc], axis=1), _lowlevel_batch(batch)


def predict_batch(model: TrainedModel, images) -> list:
    """Score a list of decoded images; vectorized across all their crops."""
    if not images:
        return []
    batches = [
        _crop_image(img, model.crop.test_count, model.crop.side, model.seed) for img in images
    ]
    merged = _SubBatch(
        np.concatenate([b.y for b in batches]),
        np.concatenate([b.u for b in batches]),
        np.concatenate([b.v for b in batches]),
        np.concatenate([np.full(b.n_subs, i, dtype=np.int64) for i, b in enumerate(batches)]),
        np.concatenate([b.mos for b in batches]),
        np.concatenate([b.dist for b in batches]),
    )
    feats, low = _inference_features(model, merged)
    n = merged.n_subs
    if model.scenario == "synthetic":
        sub_groups = distortion.route(model.router, feats)
        image_groups = np.array(
            [distortion.image_group(sub_groups[merged.parent == i]) for i in range(len(images))]
        )
        route_ids = image_groups[merged.parent]
    else:
        sub_groups = distortion.route(model.router, low)
        route_ids = sub_groups

    scores = np.empty(n)
    for g in np.unique(route_ids):
        mask = route_ids == g
        scores[mask] = gbt.predict(model.regressors[int(g)], feats[mask])
    lo, hi = model.score_range
    scores = np.clip(scores, lo, hi)

    preds = []
    for i, img in enumerate(images):
        mask = merged.parent == i
        per_sub = scores[mask]
        mos_pred = float(np.sort(per_sub)[(per_sub.size - 1) // 2])
        group = int(image_groups[i]) if model.scenario == "synthetic" else sub_groups[mask].tolist()
        preds.append(
            Prediction(image_id=img.source_id, mos_pred=mos_pred, per_sub_scores=per_sub, group=group)
        )
    return preds


def predict_image(model: TrainedModel, image: PlanarImage) -> Prediction:
    return predict_batch(model, [image])[0]


def predict_path(model: TrainedModel, path, image_id=None) -> Prediction:
    return predict_image(model, decode(path, source_id=image_id))


# --- serialization ----------------------------------------------------------

def dumps(model: TrainedModel) -> bytes:
    groups = []
    for g in range(model.router.k):
        if g in model.fallback_groups:
            groups.append("fallback")
        else:
            groups.append(model_io.gbt_state(model.regressors[g]))
    sections = {
        "meta": {
            "scenario": model.scenario,
            "crop": {
                "train_count": model.crop.train_count,
                "test_count": model.crop.test_count,
                "side": model.crop.side,
            },
            "seed": int(model.seed),
            "score_range": [model.score_range[0], model.score_range[1]],
            "spatial_gather": model.spatial_gather,
            "spatial_selected": model.spatial_selected,
            "spatiocolor_gather": model.spatiocolor_gather,
            "spatiocolor_selected": model.spatiocolor_selected,
            "fallback_groups": [int(g) for g in model.fallback_groups],
        },
        "spatial_y": model_io.spatial_state(model.spatial_y),
        "spatial_u": model_io.spatial_state(model.spatial_u),
        "spatial_v": model_io.spatial_state(model.spatial_v),
        "spatiocolor": None if model.spatiocolor is None else model_io.spatiocolor_state(model.spatiocolor),
        "router": model_io.router_state(model.router),
        "regressors": {
            "global": None if model.global_regressor is None else model_io.gbt_state(model.global_regressor),
            "groups": groups,
        },
    }
    return model_io.write_container(sections)


def loads(buf: bytes) -> TrainedModel:
    sections = model_io.read_container(buf)
    try:
        meta = sections["meta"]
        router = model_io.router_from_state(sections["router"])
        reg = sections["regressors"]
        global_model = None if reg["global"] is None else model_io.gbt_from_state(reg["global"])
        regressors = {}
        fallback = [int(g) for g in meta["fallback_groups"]]
        for g, state in enumerate(reg["groups"]):
            if state == "fallback":
                if global_model is None:
                    raise ModelCorruptionError("fallback group without a global regressor")
                regressors[g] = global_model
            else:
                regressors[g] = model_io.gbt_from_state(state)
        sc = sections["spatiocolor"]
        return TrainedModel(
            scenario=meta["scenario"],
            crop=CropConfig(**{k: int(v) for k, v in meta["crop"].items()}),
            seed=int(meta["seed"]),
            spatial_y=model_io.spatial_from_state(sections["spatial_y"]),
            spatial_u=model_io.spatial_from_state(sections["spatial_u"]),
            spatial_v=model_io.spatial_from_state(sections["spatial_v"]),
            spatial_gather=meta["spatial_gather"],
            spatial_selected=meta["spatial_selected"],
            spatiocolor=None if sc is None else model_io.spatiocolor_from_state(sc),
            spatiocolor_gather=meta["spatiocolor_gather"],
            spatiocolor_selected=meta["spatiocolor_selected"],
            router=router,
            regressors=regressors,
            fallback_groups=fallback,
            global_regressor=global_model,
            score_range=(float(meta["score_range"][0]), float(meta["score_range"][1])),
        )
    except (KeyError, TypeError, IndexError) as exc:
        raise ModelCorruptionError(f"model file inconsistent: {exc}") from exc


def save(model: TrainedModel, path) -> None:
    Path(path).write_bytes(dumps(model))


def load(path) -> TrainedModel:
    p = Path(path)
    if not p.exists():
        raise ConfigurationError(f"model file not found: {path}")
    return loads(p.read_bytes())
