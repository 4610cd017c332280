"""Binary NetPBM (P5 greyscale / P6 RGB) reading and writing."""

from __future__ import annotations

import numpy as np


class NetpbmError(ValueError):
    pass


def encode(array):
    """uint8 array ``[H, W]`` -> P5 bytes, ``[H, W, 3]`` -> P6 bytes."""
    a = np.asarray(array)
    if a.dtype != np.uint8:
        raise NetpbmError(f"expected uint8 pixels, got {a.dtype}")
    if a.ndim == 2:
        magic = b"P5"
    elif a.ndim == 3 and a.shape[2] == 3:
        magic = b"P6"
    else:
        raise NetpbmError(f"unsupported pixel array shape {a.shape}")
    h, w = a.shape[:2]
    return magic + b"\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(a).tobytes()


def _header(blob):
    """Return (magic, width, height, maxval, data offset)."""
    fields, i, n = [], 0, len(blob)
    while len(fields) < 4:
        while i < n and blob[i : i + 1].isspace():
            i += 1
        if i < n and blob[i : i + 1] == b"#":
            while i < n and blob[i : i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not blob[i : i + 1].isspace() and blob[i : i + 1] != b"#":
            i += 1
        if start == i:
            raise NetpbmError("truncated header")
        fields.append(blob[start:i])
    # exactly one whitespace byte separates maxval from the raster
    return fields[0], int(fields[1]), int(fields[2]), int(fields[3]), i + 1


def decode(blob):
    magic, w, h, maxval, off = _header(blob)
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported NetPBM type {magic!r}")
    if not 0 < maxval < 65536:
        raise NetpbmError(f"bad maxval {maxval}")
    chans = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = w * h * chans
    if len(blob) - off < count * dtype.itemsize:
        raise NetpbmError("truncated raster")
    a = np.frombuffer(blob, dtype=dtype, count=count, offset=off)
    a = a.reshape((h, w, 3) if chans == 3 else (h, w))
    if maxval != 255 or dtype.itemsize != 1:
        a = np.round(a.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return a.copy()


def read(path):
    with open(path, "rb") as f:
        return decode(f.read())


def write(path, array):
    with open(path, "wb") as f:
        f.write(encode(array))
