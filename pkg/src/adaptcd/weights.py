"""Binary weight container.

Layout (all integers little-endian)::

    b"PVCD" | version u32 | count u32
    repeated count times:
        name_len u32 | name utf-8 | rank u32 | dims u64 * rank | float32 data

Values are stored as little-endian float32 in row-major order.
"""

from __future__ import annotations

import io
import os
import struct
import warnings

import numpy as np

MAGIC = b"PVCD"
VERSION = 1


class WeightFileError(ValueError):
    pass


def dumps(tensors):
    """Serialize an ordered mapping ``name -> array`` to bytes."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr)
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(blob):
    if blob[:4] != MAGIC:
        raise WeightFileError("not a weight file (bad magic)")
    version, count = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise WeightFileError(f"unsupported weight file version {version}")
    off = 12
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + n].decode("utf-8")
        off += n
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}Q", blob, off)
        off += 8 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        if name in out:
            raise WeightFileError(f"duplicate entry {name!r}")
        out[name] = arr.astype(np.float32)
    if off != len(blob):
        raise WeightFileError(f"{len(blob) - off} trailing bytes after last entry")
    return out


def save(path, tensors):
    with open(path, "wb") as f:
        f.write(dumps(tensors))


def load(path):
    with open(path, "rb") as f:
        return loads(f.read())


def save_params(path, params):
    """Write ``[(name, Parameter), ...]`` to ``path``."""
    save(path, {name: p.data for name, p in params})


def load_into(params, source):
    """Overwrite ``params`` (name -> Parameter) from a file path or mapping.

    Every expected name must be present with a matching shape; unknown names
    only warn. Frozen flags are left untouched.
    """
    if isinstance(source, (str, os.PathLike)):
        source = load(source)
    params = dict(params)
    for name, p in params.items():
        if name not in source:
            raise WeightFileError(f"missing parameter {name!r}")
        if tuple(source[name].shape) != tuple(p.shape):
            raise WeightFileError(
                f"shape mismatch for {name!r}: file has {tuple(source[name].shape)}, model expects {tuple(p.shape)}"
            )
    extra = sorted(set(source) - set(params))
    if extra:
        warnings.warn(f"ignoring {len(extra)} unknown entries: {', '.join(extra[:5])}")
    for name, p in params.items():
        p.data = np.array(source[name], dtype=p.dtype)
