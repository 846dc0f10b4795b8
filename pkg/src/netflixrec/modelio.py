"""Versioned binary model files.

Layout (all integers little-endian)::

    b"NFRM" | u16 version | u8 len + kind tag | u32 len + JSON scalars
    | u32 n_arrays | per array: u16 len + name, u8 len + dtype, u8 ndim,
      ndim x u64 shape, raw little-endian data

Nested models (the bases of a stacked model) are stored as uint8 arrays
holding their own complete model files. KNN and stacked models need the
training matrix back at load time; it is not stored.
"""
from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Optional

import numpy as np

from .dataset import SparseRatingMatrix
from .features import AggregateStats, FeatureBuilder
from .gbt import GbtModel, RegressionTree
from .predictors import BaselineModel, GlobalMeanModel, KnnModel, MfModel
from .similarity import NeighborCache
from .stacking import StackedGbtModel

MAGIC = b"NFRM"
VERSION = 1
_TREE_FIELDS = ("feature", "threshold", "left", "right", "value", "gain", "n_samples")


def _write(kind: str, meta: dict, arrays: dict) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<H", VERSION))
    tag = kind.encode()
    out.write(struct.pack("<B", len(tag)) + tag)
    blob = json.dumps(meta, sort_keys=True).encode()
    out.write(struct.pack("<I", len(blob)) + blob)
    out.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        arr = arr.astype(arr.dtype.newbyteorder("<"))
        key = name.encode()
        dtype = arr.dtype.str.encode()
        out.write(struct.pack("<H", len(key)) + key)
        out.write(struct.pack("<B", len(dtype)) + dtype)
        out.write(struct.pack("<B", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


def _read(data: bytes) -> tuple[str, dict, dict]:
    buf = io.BytesIO(data)
    if buf.read(4) != MAGIC:
        raise ValueError("not a model file (bad magic)")
    (version,) = struct.unpack("<H", buf.read(2))
    if version != VERSION:
        raise ValueError(f"unsupported model file version {version}")
    (n,) = struct.unpack("<B", buf.read(1))
    kind = buf.read(n).decode()
    (n,) = struct.unpack("<I", buf.read(4))
    meta = json.loads(buf.read(n))
    (count,) = struct.unpack("<I", buf.read(4))
    arrays = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", buf.read(2))
        name = buf.read(n).decode()
        (n,) = struct.unpack("<B", buf.read(1))
        dtype = np.dtype(buf.read(n).decode())
        (ndim,) = struct.unpack("<B", buf.read(1))
        shape = struct.unpack(f"<{ndim}Q", buf.read(8 * ndim))
        size = int(np.prod(shape)) * dtype.itemsize
        arrays[name] = np.frombuffer(buf.read(size), dtype=dtype).reshape(shape).copy()
    return kind, meta, arrays


def _gbt_parts(gbt: GbtModel, prefix: str = "gbt_") -> tuple[dict, dict]:
    meta = {
        "base_score": gbt.base_score,
        "shrinkage": gbt.shrinkage,
        "schema": list(gbt.feature_schema),
        "max_depth": [t.max_depth for t in gbt.trees],
        "mse_history": gbt.mse_history,
    }
    sizes = np.array([len(t.feature) for t in gbt.trees], dtype=np.int64)
    arrays = {prefix + "sizes": sizes}
    for f in _TREE_FIELDS:
        parts = [getattr(t, f) for t in gbt.trees]
        arrays[prefix + f] = np.concatenate(parts) if parts else np.empty(0)
    return meta, arrays


def _gbt_from(meta: dict, arrays: dict, prefix: str = "gbt_") -> GbtModel:
    sizes = arrays[prefix + "sizes"]
    bounds = np.concatenate([[0], np.cumsum(sizes)])
    trees = []
    for t, depth in enumerate(meta["max_depth"]):
        s, e = bounds[t], bounds[t + 1]
        cols = {f: arrays[prefix + f][s:e] for f in _TREE_FIELDS}
        cols["feature"] = cols["feature"].astype(np.int64)
        cols["left"] = cols["left"].astype(np.int64)
        cols["right"] = cols["right"].astype(np.int64)
        cols["n_samples"] = cols["n_samples"].astype(np.int64)
        trees.append(RegressionTree(max_depth=int(depth), **cols))
    return GbtModel(meta["base_score"], trees, meta["shrinkage"], tuple(meta["schema"]), list(meta["mse_history"]))


def dumps(model) -> bytes:
    if isinstance(model, GlobalMeanModel):
        return _write("global-mean", {"mu": model.mu, "n_users": model.n_users, "n_movies": model.n_movies}, {})
    if isinstance(model, BaselineModel):
        return _write("baseline", {"mu": model.mu}, {"b_user": model.b_user, "b_movie": model.b_movie})
    if isinstance(model, KnnModel):
        b = model.baselines
        meta = {"mu": b.mu, "k": model.k, "shrinkage": model.shrinkage, "orientation": model.orientation,
                "shape": list(model.matrix.shape)}
        return _write("knn", meta, {"b_user": b.b_user, "b_movie": b.b_movie})
    if isinstance(model, MfModel):
        arrays = {"b_user": model.b_user, "b_movie": model.b_movie, "P": model.P, "Q": model.Q}
        if model.Y is not None:
            arrays["Y"] = model.Y
            arrays["y_sum"] = model.y_sum
        return _write("mf", {"mu": model.mu, "loss_history": model.loss_history}, arrays)
    if isinstance(model, GbtModel):
        return _write("gbt", *_gbt_parts(model))
    if isinstance(model, StackedGbtModel):
        b = model.builder
        meta, arrays = _gbt_parts(model.gbt)
        meta.update({
            "label": model.label, "use_features": model.use_features, "k": b.k,
            "neighbor_feature": b.neighbor_feature, "min_support": b.min_support,
            "g_avg": b.aggregates.g_avg, "n_bases": len(model.base_models), "shape": list(b.matrix.shape),
        })
        arrays["u_avg"] = b.aggregates.u_avg
        arrays["m_avg"] = b.aggregates.m_avg
        for i, base in enumerate(model.base_models):
            arrays[f"base{i}"] = np.frombuffer(dumps(base), dtype=np.uint8)
        return _write("stacked", meta, arrays)
    raise TypeError(f"cannot serialize {type(model).__name__}")


def _need_matrix(matrix, meta, kind):
    if matrix is None:
        raise ValueError(f"loading a {kind} model needs the training matrix")
    if list(matrix.shape) != meta["shape"]:
        raise ValueError(f"{kind} model was trained on shape {meta['shape']}, got {list(matrix.shape)}")


def loads(data: bytes, matrix: Optional[SparseRatingMatrix] = None):
    kind, meta, a = _read(data)
    if kind == "global-mean":
        return GlobalMeanModel(meta["mu"], meta["n_users"], meta["n_movies"])
    if kind == "baseline":
        return BaselineModel(meta["mu"], a["b_user"], a["b_movie"])
    if kind == "knn":
        _need_matrix(matrix, meta, kind)
        base = BaselineModel(meta["mu"], a["b_user"], a["b_movie"])
        return KnnModel(matrix, base, meta["k"], meta["shrinkage"], meta["orientation"], NeighborCache(4096))
    if kind == "mf":
        return MfModel(meta["mu"], a["b_user"], a["b_movie"], a["P"], a["Q"], a.get("Y"), a.get("y_sum"),
                       list(meta["loss_history"]))
    if kind == "gbt":
        return _gbt_from(meta, a)
    if kind == "stacked":
        _need_matrix(matrix, meta, kind)
        agg = AggregateStats(meta["g_avg"], a["u_avg"], a["m_avg"])
        builder = FeatureBuilder(matrix, agg, meta["k"], meta["neighbor_feature"], meta["min_support"])
        bases = [loads(a[f"base{i}"].tobytes(), matrix) for i in range(meta["n_bases"])]
        return StackedGbtModel(builder, bases, _gbt_from(meta, a), meta["use_features"], meta["label"])
    raise ValueError(f"unknown model kind {kind!r}")


def save_model(model, path) -> None:
    Path(path).write_bytes(dumps(model))


def load_model(path, matrix: Optional[SparseRatingMatrix] = None):
    return loads(Path(path).read_bytes(), matrix)
