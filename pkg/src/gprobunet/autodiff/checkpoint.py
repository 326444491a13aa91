"""Single-file parameter checkpoints.

Layout::

    b"GPUNCKPT"                  8-byte magic
    uint32 LE                    format version (currently 1)
    uint64 LE                    header length in bytes
    header                       UTF-8 JSON: {"entries": [{"name", "shape"}...], "meta": {...}}
    payload                      float64 little-endian arrays, row-major, in entry order
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Mapping

import numpy as np

MAGIC = b"GPUNCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, arrays: Mapping[str, np.ndarray], meta: dict[str, Any] | None = None) -> None:
    entries = [{"name": k, "shape": list(np.shape(v))} for k, v in arrays.items()]
    header = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for v in arrays.values():
            fh.write(np.ascontiguousarray(v, dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple["OrderedDict[str, np.ndarray]", dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<IQ", raw, 8)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 8 + struct.calcsize("<IQ")
    header = json.loads(raw[off:off + hlen].decode("utf-8"))
    off += hlen
    arrays: OrderedDict[str, np.ndarray] = OrderedDict()
    for e in header["entries"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape)) if shape else 1
        if off + 8 * n > len(raw):
            raise CheckpointError(f"{path}: truncated payload at entry {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
        off += 8 * n
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    return arrays, header.get("meta", {})
