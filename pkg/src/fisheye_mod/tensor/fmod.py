"""Binary weight file ("FMOD").

Little-endian layout::

    b"FMOD" | u32 version=1 | u32 count |
    count x { u32 name_len | utf-8 name | u32 rank | u32 dims[rank] | f64 values[prod(dims)] }
"""

from __future__ import annotations

import io
import os
import struct

import numpy as np

from ..errors import DataError

MAGIC = b"FMOD"
VERSION = 1


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", VERSION, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(a.tobytes())
    return buf.getvalue()


def loads(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:4] != MAGIC:
        raise DataError("not an FMOD weight file (bad magic)")
    pos = 4

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise DataError("truncated FMOD weight file")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise DataError(f"unsupported FMOD version {version}")
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        size = int(np.prod(dims)) if rank else 1
        out[name] = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
    if pos != len(blob):
        raise DataError(f"FMOD weight file has {len(blob) - pos} trailing bytes")
    return out


def save(path: str | os.PathLike, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as f:
        f.write(dumps(tensors))


def load(path: str | os.PathLike) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        return loads(f.read())
