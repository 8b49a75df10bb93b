"""Flat binary tensor files and base64 helpers for JSON documents.

File layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
header, then raw little-endian float64 data.
"""

from __future__ import annotations

import base64
import json
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidArgumentError

MAGIC = b"SVCTBIN1"
LAYOUTS = ("row-major", "projection-major")


def save_tensor(path, array, layout="row-major", meta=None) -> Path:
    if layout not in LAYOUTS:
        raise InvalidArgumentError(f"unknown layout {layout!r}")
    arr = np.ascontiguousarray(array, dtype="<f8")
    header = {"shape": list(arr.shape), "dtype": "f64", "layout": layout}
    if meta:
        header["meta"] = meta
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(arr.tobytes())
    return path


def load_tensor(path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != MAGIC:
            raise InvalidArgumentError(f"{path}: bad magic {magic!r}")
        (size,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(size).decode("utf-8"))
        if header.get("dtype") != "f64":
            raise InvalidArgumentError(f"{path}: unsupported dtype {header.get('dtype')!r}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    shape = tuple(header["shape"])
    if data.size != int(np.prod(shape, dtype=np.int64)):
        raise InvalidArgumentError(f"{path}: payload size does not match header shape {shape}")
    return data.reshape(shape).astype(float), header


def encode_array(a) -> dict:
    a = np.ascontiguousarray(a, dtype="<f8")
    return {"shape": list(a.shape), "data": base64.b64encode(a.tobytes()).decode("ascii")}


def decode_array(doc) -> np.ndarray:
    raw = base64.b64decode(doc["data"])
    return np.frombuffer(raw, dtype="<f8").reshape(doc["shape"]).astype(float)
