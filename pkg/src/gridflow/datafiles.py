"""Dataset (`.ds`) and model file serialization.

`.ds` files: magic line, length-prefixed JSON header (slot names,
normalization parameters, split indices), then the feature and target
matrices as little-endian float64, row-major.  Model files are JSON text;
Python's shortest-repr float encoding makes both formats bitwise lossless.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .scenarios import Dataset, Normalizer, SchemaMismatch

DS_MAGIC = b"GFDS1\n"
MODEL_FORMAT = "gridflow-model"
MODEL_VERSION = 1


def _norm_to_json(norm: Normalizer | None):
    if norm is None:
        return None
    return {"mins": norm.mins.tolist(), "maxs": norm.maxs.tolist()}


def _norm_from_json(obj):
    if obj is None:
        return None
    return Normalizer(np.array(obj["mins"], float), np.array(obj["maxs"], float))


def write_dataset(ds: Dataset, path) -> None:
    header = {
        "n": int(ds.n),
        "dx": len(ds.x_slots),
        "dy": len(ds.y_slots),
        "x_slots": ds.x_slots,
        "y_slots": ds.y_slots,
        "x_norm": _norm_to_json(ds.x_norm),
        "y_norm": _norm_to_json(ds.y_norm),
        "train_idx": ds.train_idx.tolist(),
        "test_idx": ds.test_idx.tolist(),
        "dropped": int(ds.dropped),
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(DS_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(ds.x, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(ds.y, dtype="<f8").tobytes())


def read_dataset(path) -> Dataset:
    with open(path, "rb") as fh:
        magic = fh.read(len(DS_MAGIC))
        if magic != DS_MAGIC:
            raise SchemaMismatch(f"{path}: not a gridflow dataset file")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        n, dx, dy = header["n"], header["dx"], header["dy"]
        if len(header["x_slots"]) != dx or len(header["y_slots"]) != dy:
            raise SchemaMismatch(f"{path}: slot count disagrees with header")
        raw = fh.read()
    want = (n * dx + n * dy) * 8
    if len(raw) != want:
        raise SchemaMismatch(f"{path}: expected {want} matrix bytes, got {len(raw)}")
    x = np.frombuffer(raw[: n * dx * 8], dtype="<f8").reshape(n, dx).copy()
    y = np.frombuffer(raw[n * dx * 8:], dtype="<f8").reshape(n, dy).copy()
    return Dataset(x=x, y=y, x_slots=header["x_slots"], y_slots=header["y_slots"],
                   x_norm=_norm_from_json(header["x_norm"]),
                   y_norm=_norm_from_json(header["y_norm"]),
                   train_idx=np.array(header["train_idx"], int),
                   test_idx=np.array(header["test_idx"], int),
                   dropped=header["dropped"])


def write_model(model_dict: dict, path) -> None:
    doc = {"format": MODEL_FORMAT, "version": MODEL_VERSION}
    doc.update(model_dict)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def read_model(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise SchemaMismatch(f"{path}: not a valid model file ({exc})") from None
    if not isinstance(doc, dict) or doc.get("format") != MODEL_FORMAT:
        raise SchemaMismatch(f"{path}: not a gridflow model file")
    if doc.get("version") != MODEL_VERSION:
        raise SchemaMismatch(f"{path}: unsupported model version {doc.get('version')!r}")
    for key in ("layers", "weights"):
        if key not in doc:
            raise SchemaMismatch(f"{path}: missing {key!r} section")
    return doc
