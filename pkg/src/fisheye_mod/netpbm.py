"""Binary PPM (P6) / PGM (P5) reading and writing, maxval 255 only."""

from __future__ import annotations

import os

import numpy as np

from .errors import DataError


def _header(magic: bytes, width: int, height: int) -> bytes:
    return magic + b"\n%d %d\n255\n" % (width, height)


def write_ppm(path: str | os.PathLike, rgb: np.ndarray) -> None:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("write_ppm expects an H x W x 3 uint8 array")
    with open(path, "wb") as f:
        f.write(_header(b"P6", rgb.shape[1], rgb.shape[0]))
        f.write(np.ascontiguousarray(rgb).tobytes())


def write_pgm(path: str | os.PathLike, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2 or gray.dtype != np.uint8:
        raise ValueError("write_pgm expects an H x W uint8 array")
    with open(path, "wb") as f:
        f.write(_header(b"P5", gray.shape[1], gray.shape[0]))
        f.write(np.ascontiguousarray(gray).tobytes())


def _parse(blob: bytes, path) -> tuple[bytes, int, int, bytes]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise DataError(f"{path}: truncated netpbm header")
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace byte before the raster
    magic, w, h, maxval = tokens
    try:
        width, height, mv = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise DataError(f"{path}: malformed netpbm header") from exc
    if mv != 255:
        raise DataError(f"{path}: only maxval 255 is supported, got {mv}")
    return magic, width, height, blob[pos:]


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h, raster = _parse(f.read(), path)
    if magic != b"P6":
        raise DataError(f"{path}: expected P6, found {magic!r}")
    if len(raster) != w * h * 3:
        raise DataError(f"{path}: raster has {len(raster)} bytes, expected {w * h * 3}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w, 3).copy()


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as f:
        magic, w, h, raster = _parse(f.read(), path)
    if magic != b"P5":
        raise DataError(f"{path}: expected P5, found {magic!r}")
    if len(raster) != w * h:
        raise DataError(f"{path}: raster has {len(raster)} bytes, expected {w * h}")
    return np.frombuffer(raster, dtype=np.uint8).reshape(h, w).copy()
