"""Deterministic binary array container with a versioned header.

Layout: 8-byte magic, uint32 version, uint64 header length, UTF-8 JSON header,
then the raw little-endian array payloads concatenated in header order. No
timestamps or other nondeterministic bytes, so identical inputs produce
byte-identical files.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import IoError, SchemaError

MAGIC = b"SSPLATAR"
VERSION = 1


def write_container(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    entries = []
    payloads = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dtype = arr.dtype.newbyteorder("<")
        data = arr.astype(dtype, copy=False).tobytes()
        entries.append({"name": name, "dtype": dtype.str, "shape": list(arr.shape)})
        payloads.append(data)
    header = json.dumps({"meta": meta or {}, "arrays": entries}, sort_keys=True).encode("utf-8")
    try:
        with open(path, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for data in payloads:
                fh.write(data)
    except OSError as exc:
        raise IoError(f"failed to write container {path}: {exc}") from exc


def read_container(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if not path.exists():
        raise IoError(f"container not found: {path}")
    blob = path.read_bytes()
    if blob[:8] != MAGIC:
        raise SchemaError(f"{path} is not an array container (bad magic)")
    (version,) = struct.unpack("<I", blob[8:12])
    if version != VERSION:
        raise SchemaError(f"unsupported container version {version}")
    (hlen,) = struct.unpack("<Q", blob[12:20])
    try:
        header = json.loads(blob[20 : 20 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"corrupt container header in {path}: {exc}") from exc
    arrays = {}
    offset = 20 + hlen
    for entry in header["arrays"]:
        dtype = np.dtype(entry["dtype"])
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        nbytes = dtype.itemsize * count
        arr = np.frombuffer(blob[offset : offset + nbytes], dtype=dtype).reshape(shape)
        arrays[entry["name"]] = arr.copy()
        offset += nbytes
    return arrays, header.get("meta", {})
