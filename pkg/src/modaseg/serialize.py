"""Deterministic single-file container for named arrays plus a JSON header.

Used for checkpoints. Unlike zip-based formats the bytes depend only on the
content (no timestamps), so identical state serializes to identical files —
which the pipeline's reproducibility guarantees rely on.

Layout: magic, 8-byte little-endian header length, UTF-8 JSON header
(``{"meta": ..., "arrays": [{name, dtype, shape}, ...]}``), then the raw
array bytes concatenated in header order (C-order, little-endian dtypes).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"MSBLOB1\n"

_DTYPES = {"<f8": np.dtype("<f8"), "<f4": np.dtype("<f4"),
           "<i8": np.dtype("<i8"), "<i4": np.dtype("<i4"),
           "<i2": np.dtype("<i2"), "|u1": np.dtype("|u1")}


def _wire_dtype(arr: np.ndarray) -> str:
    for code, dt in _DTYPES.items():
        if arr.dtype == dt:
            return code
    raise ValidationError(f"unsupported dtype for blob: {arr.dtype}")


def write_blob(path, meta: dict, arrays: dict) -> None:
    names = sorted(arrays)
    entries = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name])
        entries.append({"name": name, "dtype": _wire_dtype(arr), "shape": list(arr.shape)})
    header = json.dumps({"meta": meta, "arrays": entries},
                        sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for name in names:
            f.write(np.ascontiguousarray(arrays[name]).tobytes(order="C"))
    tmp.replace(path)


def read_blob(path):
    with open(path, "rb") as f:
        magic = f.read(len(MAGIC))
        if magic != MAGIC:
            raise ValidationError(f"{path}: not a blob file")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        arrays = {}
        for entry in header["arrays"]:
            dt = _DTYPES[entry["dtype"]]
            count = int(np.prod(entry["shape"])) if entry["shape"] else 1
            buf = f.read(count * dt.itemsize)
            arrays[entry["name"]] = np.frombuffer(buf, dtype=dt).reshape(entry["shape"]).copy()
    return header["meta"], arrays
