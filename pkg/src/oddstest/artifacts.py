"""Persistence: tensor bundles, model checkpoints, calibration artifacts, reports."""
import csv
import hashlib
import io
import json
import math
import os

import numpy as np

from .models import Classifier
from .noise import NoiseGrid
from .odds import OddsStatistics, StatsMismatchError, detect, correct, max_excess, votes
from .meta import LogisticModel

SCHEMA_VERSION = 1
BLOB = "data.bin"
_DTYPES = {"f8": "<f8", "f4": "<f4", "i8": "<i8", "b1": "|b1"}


class ArtifactError(ValueError):
    pass


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return v
    return obj


def _unplain_float(v):
    if isinstance(v, list):
        return [_unplain_float(u) for u in v]
    if isinstance(v, str):
        return float(v)
    return v


def dumps(obj):
    """Deterministic JSON text (sorted keys, non-finite floats as strings)."""
    return json.dumps(_plain(obj), sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_json(path, obj):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(obj))


def read_json(path):
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


# tensor bundles

def _tag(arr):
    kind = {"f": "f", "i": "i", "u": "i", "b": "b"}[arr.dtype.kind]
    size = 1 if kind == "b" else (4 if kind == "f" and arr.dtype.itemsize == 4 else 8)
    return f"{kind}{size}"


def save_bundle(path, tensors, meta=None, kind="tensors"):
    """Directory with manifest.json and one little-endian row-major blob."""
    os.makedirs(path, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        tag = _tag(arr)
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": tag, "offset": offset,
                        "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    blob = b"".join(chunks)
    manifest = {"schema_version": SCHEMA_VERSION, "kind": kind, "blob": BLOB, "tensors": entries,
                "sha256": hashlib.sha256(blob).hexdigest(), "meta": meta or {}}
    with open(os.path.join(path, BLOB), "wb") as fh:
        fh.write(blob)
    write_json(os.path.join(path, "manifest.json"), manifest)
    return path


def load_bundle(path, kind=None):
    manifest = read_json(os.path.join(path, "manifest.json"))
    if manifest.get("schema_version") != SCHEMA_VERSION:
        raise ArtifactError(f"unsupported schema version {manifest.get('schema_version')}")
    if kind is not None and manifest.get("kind") != kind:
        raise ArtifactError(f"expected a {kind} bundle, found {manifest.get('kind')}")
    with open(os.path.join(path, manifest["blob"]), "rb") as fh:
        blob = fh.read()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ArtifactError("blob checksum mismatch")
    out = {}
    for e in manifest["tensors"]:
        raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
        out[e["name"]] = np.frombuffer(raw, dtype=_DTYPES[e["dtype"]]).reshape(e["shape"]).copy()
    return out, manifest["meta"]


# models

def save_model(path, model):
    return save_bundle(path, model.params, {"architecture": model.arch, "checksum": model.checksum()}, "model")


def load_model(path):
    params, meta = load_bundle(path, "model")
    model = Classifier(meta["architecture"], params)
    if model.checksum() != meta["checksum"]:
        raise ArtifactError("model checksum mismatch")
    return model


# datasets

def save_dataset(path, ds):
    tensors = {"x": ds.x, "y": ds.y.astype(np.int64)}
    for k, v in ds.splits.items():
        tensors[f"split_{k}"] = np.asarray(v, dtype=np.int64)
    return save_bundle(path, tensors, {"num_classes": ds.num_classes, "provenance": ds.provenance}, "dataset")


def load_dataset(path):
    from .data import Dataset
    t, meta = load_bundle(path, "dataset")
    splits = {k[6:]: v for k, v in t.items() if k.startswith("split_")}
    return Dataset(t["x"], t["y"], meta["num_classes"], splits, meta.get("provenance", {}))


# attacks

def save_attack(path, x_adv, success, ids, spec):
    return save_bundle(path, {"x_adv": x_adv, "success": np.asarray(success, dtype=bool),
                              "ids": np.asarray(ids, dtype=np.int64)}, {"spec": spec}, "attack")


def load_attack(path):
    t, meta = load_bundle(path, "attack")
    return t["x_adv"], t["success"], t["ids"], meta["spec"]


# statistics

def stats_to_dict(stats, meta=None):
    d = {"schema_version": SCHEMA_VERSION, "kind": "odds-statistics", "model_checksum": stats.model_checksum,
         "grid": stats.grid.to_dict(), "mu": stats.mu, "sigma": stats.sigma, "counts": stats.counts,
         "aggregation": stats.aggregation, "vote": stats.vote, "thresholds": stats.thresholds,
         "source_thresholds": stats.source_thresholds, "best_cell": stats.best_cell, "level": stats.level,
         "fallback_pairs": [list(p) for p in stats.fallback_pairs], "calibration": stats.calibration}
    if meta is not None:
        d["meta"] = {"attack": meta.attack, "l2": meta.l2, "fallback": meta.fallback, "info": meta.info,
                     "weights": [None if w is None else w for w in meta.weights]}
    return _plain(d)


def stats_from_dict(d, model=None):
    if d.get("schema_version") != SCHEMA_VERSION or d.get("kind") != "odds-statistics":
        raise ArtifactError("not a supported calibration artifact")
    if model is not None and model.checksum() != d["model_checksum"]:
        raise StatsMismatchError("calibration artifact belongs to a different model")

    def arr(v):
        return None if v is None else np.array(_unplain_float(v), dtype=float)

    stats = OddsStatistics(arr(d["mu"]), arr(d["sigma"]), np.array(d["counts"], dtype=int),
                           NoiseGrid.from_dict(d["grid"]), d["model_checksum"], d["aggregation"], d["vote"],
                           arr(d["thresholds"]), arr(d["source_thresholds"]), d["best_cell"], d["level"],
                           [tuple(p) for p in d["fallback_pairs"]], d["calibration"])
    meta = None
    if "meta" in d:
        m = d["meta"]
        meta = LogisticModel([arr(w) for w in m["weights"]], m["attack"], m["l2"], m["fallback"], m["info"])
    return stats, meta


def save_stats(path, stats, meta=None):
    write_json(path, stats_to_dict(stats, meta))


def load_stats(path, model=None):
    return stats_from_dict(read_json(path), model)


# reports

def detection_rows(scores, stats, meta=None):
    from .meta import meta_correct
    flag = detect(scores, stats)
    fixed = meta_correct(scores, meta, stats) if meta is not None else correct(scores, stats)
    mx = max_excess(scores, stats)
    agg = scores.aggregated(stats).copy()
    agg[np.arange(len(agg)), scores.pred] = -np.inf
    v = votes(scores, stats)
    rows = []
    for i in range(len(scores)):
        rows.append({"id": int(scores.ids[i]), "y": int(scores.pred[i]), "flag": int(flag[i]),
                     "corrected": int(fixed[i]), "max_z": f"{agg[i].max():.9g}", "max_excess": f"{mx[i]:.9g}",
                     "votes": ";".join(str(int(b)) for b in v[i])})
    return rows


def write_csv(path, rows, header=None):
    header = header or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=header, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in r.items()})
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def write_matrix_csv(path, matrix, row_label, rows, cols, sidecar):
    buf = io.StringIO()
    buf.write(",".join([row_label] + [f"{c:.9g}" for c in cols]) + "\n")
    for r, vals in zip(rows, matrix):
        buf.write(",".join([f"{r:.9g}"] + [f"{v:.9g}" for v in vals]) + "\n")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    write_json(os.path.splitext(path)[0] + ".json", sidecar)
