"""Versioned binary container for trained models.

Layout: magic "GBQA", u32 format version, u32 section count, then
length-prefixed named sections. Section payloads use a small self-describing
tagged encoding (little-endian, 64-bit floats for all real-valued arrays) so
a round trip is bit-exact.
"""

import struct

import numpy as np

from .distortion import DistortionRouter
from .errors import ModelCorruptionError, ModelFormatError
from .gbt import GbtModel, Tree
from .spatial import SpatialGeometry, SpatialModel
from .spatiocolor import SpatioColorGeometry, SpatioColorModel
from .transforms import PcaBasis, SaabKernel

MAGIC = b"GBQA"
FORMAT_VERSION = 1

_T_NONE, _T_BOOL, _T_INT, _T_FLOAT, _T_STR, _T_LIST, _T_DICT, _T_ARRAY = range(8)
_DTYPES = {0: "<f8", 1: "<i8", 2: "<i4", 3: "|u1"}
_DTYPE_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}


class _Writer:
    def __init__(self):
        self.chunks = []

    def bytes(self) -> bytes:
        return b"".join(self.chunks)

    def u8(self, v):
        self.chunks.append(struct.pack("<B", v))

    def u32(self, v):
        self.chunks.append(struct.pack("<I", v))

    def i64(self, v):
        self.chunks.append(struct.pack("<q", v))

    def f64(self, v):
        self.chunks.append(struct.pack("<d", v))

    def raw(self, b):
        self.chunks.append(b)

    def value(self, v):
        if v is None:
            self.u8(_T_NONE)
        elif isinstance(v, (bool, np.bool_)):
            self.u8(_T_BOOL)
            self.u8(1 if v else 0)
        elif isinstance(v, (int, np.integer)):
            self.u8(_T_INT)
            self.i64(int(v))
        elif isinstance(v, (float, np.floating)):
            self.u8(_T_FLOAT)
            self.f64(float(v))
        elif isinstance(v, str):
            enc = v.encode("utf-8")
            self.u8(_T_STR)
            self.i64(len(enc))
            self.raw(enc)
        elif isinstance(v, np.ndarray):
            arr = v
            if arr.dtype == np.float32 or arr.dtype == np.float64:
                arr = arr.astype("<f8", copy=False)
            elif arr.dtype == np.int32:
                arr = arr.astype("<i4", copy=False)
            elif arr.dtype == np.uint8:
                arr = arr.astype("|u1", copy=False)
            else:
                arr = arr.astype("<i8", copy=False)
            code = _DTYPE_CODES[np.dtype(arr.dtype.str.replace(">", "<"))]
            self.u8(_T_ARRAY)
            self.u8(code)
            self.u8(arr.ndim)
            for d in arr.shape:
                self.i64(d)
            self.raw(np.ascontiguousarray(arr).tobytes())
        elif isinstance(v, (list, tuple)):
            self.u8(_T_LIST)
            self.i64(len(v))
            for item in v:
                self.value(item)
        elif isinstance(v, dict):
            self.u8(_T_DICT)
            self.i64(len(v))
            for k in v:
                if not isinstance(k, str):
                    raise TypeError(f"dict keys must be str, got {type(k)}")
                self.value(k)
                self.value(v[k])
        else:
            raise TypeError(f"cannot serialize {type(v)}")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise ModelCorruptionError("model file truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def u8(self):
        return struct.unpack("<B", self.take(1))[0]

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def i64(self):
        return struct.unpack("<q", self.take(8))[0]

    def f64(self):
        return struct.unpack("<d", self.take(8))[0]

    def value(self):
        tag = self.u8()
        if tag == _T_NONE:
            return None
        if tag == _T_BOOL:
            return bool(self.u8())
        if tag == _T_INT:
            return self.i64()
        if tag == _T_FLOAT:
            return self.f64()
        if tag == _T_STR:
            return self.take(self.i64()).decode("utf-8")
        if tag == _T_ARRAY:
            code = self.u8()
            ndim = self.u8()
            shape = tuple(self.i64() for _ in range(ndim))
            if code not in _DTYPES:
                raise ModelCorruptionError(f"unknown array dtype code {code}")
            dt = np.dtype(_DTYPES[code])
            n = int(np.prod(shape)) if shape else 1
            raw = self.take(n * dt.itemsize)
            return np.frombuffer(raw, dtype=dt).reshape(shape).copy()
        if tag == _T_LIST:
            return [self.value() for _ in range(self.i64())]
        if tag == _T_DICT:
            return {self.value(): self.value() for _ in range(self.i64())}
        raise ModelCorruptionError(f"unknown value tag {tag}")


def write_container(sections: dict) -> bytes:
    """sections: ordered dict of name -> python value."""
    out = [MAGIC, struct.pack("<I", FORMAT_VERSION), struct.pack("<I", len(sections))]
    for name, value in sections.items():
        w = _Writer()
        w.value(value)
        payload = w.bytes()
        enc = name.encode("utf-8")
        out.append(struct.pack("<I", len(enc)))
        out.append(enc)
        out.append(struct.pack("<Q", len(payload)))
        out.append(payload)
    return b"".join(out)


def read_container(buf: bytes) -> dict:
    if buf[:4] != MAGIC:
        raise ModelFormatError(f"bad magic {buf[:4]!r}, expected {MAGIC!r}")
    r = _Reader(buf)
    r.pos = 4
    version = r.u32()
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version}")
    n = r.u32()
    sections = {}
    for _ in range(n):
        name = r.take(r.u32()).decode("utf-8")
        payload = r.take(struct.unpack("<Q", r.take(8))[0])
        sections[name] = _Reader(payload).value()
    return sections


# --- per-object state dicts -------------------------------------------------

def saab_state(k: SaabKernel) -> dict:
    return {
        "patch_shape": list(k.patch_shape),
        "dc": k.dc_kernel,
        "ac": k.ac_kernels,
        "energy": k.energy,
        "bias": k.bias,
    }


def saab_from_state(s: dict) -> SaabKernel:
    return SaabKernel(
        patch_shape=tuple(s["patch_shape"]),
        dc_kernel=s["dc"],
        ac_kernels=s["ac"],
        energy=s["energy"],
        bias=s["bias"],
    )


def pca_state(b) -> dict:
    if b is None:
        return None
    return {"mean": b.mean, "components": b.components, "var": b.explained_variance, "offset": b.offset}


def pca_from_state(s):
    if s is None:
        return None
    return PcaBasis(mean=s["mean"], components=s["components"], explained_variance=s["var"], offset=s["offset"])


def spatial_state(m: SpatialModel) -> dict:
    return {
        "side": m.geometry.side,
        "hop1": saab_state(m.hop1_kernel),
        "hop2": saab_state(m.hop2_kernel) if m.hop2_kernel is not None else None,
        "agg_pca": [pca_state(b) for b in m.agg_pca],
    }


def spatial_from_state(s: dict) -> SpatialModel:
    return SpatialModel(
        geometry=SpatialGeometry.for_side(int(s["side"])),
        hop1_kernel=saab_from_state(s["hop1"]),
        hop2_kernel=saab_from_state(s["hop2"]) if s["hop2"] is not None else None,
        agg_pca=[pca_from_state(b) for b in s["agg_pca"]],
    )


def spatiocolor_state(m: SpatioColorModel) -> dict:
    return {
        "side": m.geometry.side,
        "hop1": saab_state(m.hop1_kernel),
        "hop2": saab_state(m.hop2_kernel),
        "channel_pca": [pca_state(b) for b in m.channel_pca],
        "n_components": m.n_components,
    }


def spatiocolor_from_state(s: dict) -> SpatioColorModel:
    return SpatioColorModel(
        geometry=SpatioColorGeometry.for_side(int(s["side"])),
        hop1_kernel=saab_from_state(s["hop1"]),
        hop2_kernel=saab_from_state(s["hop2"]),
        channel_pca=[pca_from_state(b) for b in s["channel_pca"]],
        n_components=int(s["n_components"]),
    )


def _tree_state(t: Tree) -> dict:
    return {"f": t.feature, "t": t.threshold, "l": t.left, "r": t.right, "v": t.value}


def _tree_from_state(s: dict) -> Tree:
    return Tree(feature=s["f"], threshold=s["t"], left=s["l"], right=s["r"], value=s["v"])


def gbt_state(m: GbtModel) -> dict:
    if m.kind == "regression":
        trees = [_tree_state(t) for t in m.trees]
    else:
        trees = [[_tree_state(t) for t in rnd] for rnd in m.trees]
    return {
        "kind": m.kind,
        "trees": trees,
        "base": np.atleast_1d(np.asarray(m.base_score, dtype=np.float64)),
        "lr": m.learning_rate,
        "n_features": m.n_features,
        "n_classes": m.n_classes,
    }


def gbt_from_state(s: dict) -> GbtModel:
    kind = s["kind"]
    if kind == "regression":
        trees = [_tree_from_state(t) for t in s["trees"]]
        base = np.float64(s["base"][0])
    else:
        trees = [[_tree_from_state(t) for t in rnd] for rnd in s["trees"]]
        base = s["base"]
    return GbtModel(
        kind=kind,
        trees=trees,
        base_score=base,
        learning_rate=float(s["lr"]),
        n_features=int(s["n_features"]),
        n_classes=int(s["n_classes"]),
    )


def router_state(r: DistortionRouter) -> dict:
    return {
        "kind": r.kind,
        "k": r.k,
        "classifier": gbt_state(r.classifier) if r.classifier is not None else None,
        "merge_map": {str(k): v for k, v in r.merge_map.items()} if r.merge_map is not None else None,
        "centroids": r.centroids,
        "mean": r.lowlevel_mean,
        "std": r.lowlevel_std,
    }


def router_from_state(s: dict) -> DistortionRouter:
    merge = s["merge_map"]
    return DistortionRouter(
        kind=s["kind"],
        k=int(s["k"]),
        classifier=gbt_from_state(s["classifier"]) if s["classifier"] is not None else None,
        merge_map={int(k): int(v) for k, v in merge.items()} if merge is not None else None,
        centroids=s["centroids"],
        lowlevel_mean=s["mean"],
        lowlevel_std=s["std"],
    )
