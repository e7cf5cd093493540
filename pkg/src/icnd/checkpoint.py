"""Versioned binary container for model parameters.

Layout::

    b"ICND" | u16 version | u32 header length | UTF-8 JSON header | blobs

The header holds ``kind``, ``hyper`` and one entry per blob with its name,
shape, byte offset (relative to the blob section) and byte length. Blobs are
little-endian float64.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"ICND"
VERSION = 1
_DTYPE = np.dtype("<f8")


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, kind, hyper, arrays):
    """Write ``arrays`` (name → ndarray, insertion order kept) to ``path``."""
    blobs, entries, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype=_DTYPE)
        raw = a.tobytes()
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"kind": kind, "hyper": hyper, "blobs": entries}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", VERSION, len(header)) + header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    """Return ``(kind, hyper, arrays)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an ICND checkpoint")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = 10 + hlen
    header = json.loads(buf[10:start].decode())
    arrays = {}
    for e in header["blobs"]:
        raw = buf[start + e["offset"]:start + e["offset"] + e["nbytes"]]
        if len(raw) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated blob {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype=_DTYPE).reshape(e["shape"]).copy()
    return header["kind"], header["hyper"], arrays
