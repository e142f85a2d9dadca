"""Binary PGM (P5) reading and writing, 8- or 16-bit."""

from __future__ import annotations

from pathlib import Path

import numpy as np


class PGMFormatError(ValueError):
    pass


def write_pgm16(path: str | Path, values: np.ndarray) -> None:
    """Write a [0, 1] plane as 16-bit big-endian P5 with maxval 65535."""
    v = np.asarray(values, dtype=np.float64)
    if v.ndim != 2:
        raise ValueError(f"PGM plane must be 2-D, got {v.shape}")
    q = np.rint(np.clip(v, 0.0, 1.0) * 65535).astype(">u2")
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + q.tobytes())


def _tokens(raw: bytes, count: int) -> tuple[list[bytes], int]:
    toks: list[bytes] = []
    i, n = 0, len(raw)
    while len(toks) < count:
        while i < n and raw[i:i + 1].isspace():
            i += 1
        if i < n and raw[i:i + 1] == b"#":
            while i < n and raw[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        j = i
        while j < n and not raw[j:j + 1].isspace() and raw[j:j + 1] != b"#":
            j += 1
        if j == i:
            raise PGMFormatError("truncated PGM header")
        toks.append(raw[i:j])
        i = j
    # exactly one whitespace byte separates the header from the raster
    return toks, i + 1


def read_pgm(path: str | Path) -> tuple[np.ndarray, int]:
    """Return (raw integer plane, maxval)."""
    raw = Path(path).read_bytes()
    toks, offset = _tokens(raw, 4)
    if toks[0] != b"P5":
        raise PGMFormatError(f"{path}: expected P5 magic, got {toks[0]!r}")
    try:
        w, h, maxval = (int(t) for t in toks[1:])
    except ValueError:
        raise PGMFormatError(f"{path}: non-integer header field") from None
    if w < 1 or h < 1 or not 0 < maxval < 65536:
        raise PGMFormatError(f"{path}: bad header values {w}x{h} maxval {maxval}")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = w * h * dtype.itemsize
    body = raw[offset:offset + need]
    if len(body) != need:
        raise PGMFormatError(f"{path}: raster has {len(body)} bytes, expected {need}")
    return np.frombuffer(body, dtype=dtype).reshape(h, w).astype(np.int64), maxval


def read_pgm_unit(path: str | Path) -> np.ndarray:
    """Read a PGM and scale to [0, 1] by its maxval."""
    plane, maxval = read_pgm(path)
    return plane.astype(np.float64) / maxval
