"""Binary portable graymap (P5) reading and writing."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, PGMParseError, UnsupportedFormatError

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _parse_header(buf):
    pos = 0
    fields = []
    for _ in range(4):
        m = _TOKEN.match(buf, pos)
        if not m:
            raise PGMParseError("truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    if fields[0] != b"P5":
        raise PGMParseError(f"not a binary graymap (magic {fields[0]!r})")
    try:
        width, height, maxval = (int(f) for f in fields[1:])
    except ValueError:
        raise PGMParseError("non-numeric PGM header field") from None
    if width <= 0 or height <= 0 or not 0 < maxval < 65536:
        raise PGMParseError(f"bad PGM header values {width}x{height} max {maxval}")
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PGMParseError("missing whitespace after PGM header")
    return width, height, maxval, pos + 1


def _read(path, expect_maxval):
    buf = Path(path).read_bytes()
    width, height, maxval, start = _parse_header(buf)
    if maxval != expect_maxval:
        raise UnsupportedFormatError(f"{path}: depth {maxval}, expected {expect_maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = width * height
    payload = buf[start:start + n * dtype.itemsize]
    if len(payload) != n * dtype.itemsize:
        raise PGMParseError(f"{path}: expected {n} samples, file is short")
    return np.frombuffer(payload, dtype=dtype).reshape(height, width).astype(np.float64) / maxval


def _write(image, path, maxval):
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2 or img.size == 0:
        raise InvalidInputError(f"expected a nonempty 2-D image, got shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise InvalidInputError("image contains non-finite pixels")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval)
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(q.astype(dtype).tobytes())


def read_pgm(path):
    """Read an 8-bit P5 file into a float image in [0, 1]."""
    return _read(path, 255)


def write_pgm(image, path):
    """Write a [0, 1] float image as 8-bit P5 (values are clipped, then rounded)."""
    _write(image, path, 255)


def read_pgm16(path):
    return _read(path, 65535)


def write_pgm16(image, path):
    _write(image, path, 65535)


def quantize8(image):
    return np.rint(np.clip(image, 0.0, 1.0) * 255) / 255
