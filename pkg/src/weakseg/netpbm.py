"""Binary PGM (P5) and PPM (P6) reading and writing, 8-bit only."""

from __future__ import annotations

import os

import numpy as np

MAX_DIM = 1 << 16


class NetpbmError(ValueError):
    pass


def _quantize(grid: np.ndarray) -> np.ndarray:
    g = np.asarray(grid, dtype=np.float64)
    if g.size and (np.nanmin(g) < 0.0 or np.nanmax(g) > 1.0 or np.isnan(g).any()):
        raise ValueError("pixel values must lie in [0, 1]")
    # round half away from zero, i.e. round(v * 255) as usually written
    return np.floor(g * 255.0 + 0.5).astype(np.uint8)


def encode_pgm(grid) -> bytes:
    g = np.asarray(grid)
    if g.ndim != 2:
        raise ValueError(f"PGM needs a 2-d grid, got shape {g.shape}")
    h, w = g.shape
    return b"P5\n%d %d\n255\n" % (w, h) + _quantize(g).tobytes()


def encode_ppm(rgb) -> bytes:
    g = np.asarray(rgb)
    if g.ndim != 3 or g.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) grid, got shape {g.shape}")
    h, w = g.shape[:2]
    return b"P6\n%d %d\n255\n" % (w, h) + _quantize(g).tobytes()


def _tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    pos, out = 0, []
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise NetpbmError("truncated header")
        out.append(data[start:pos])
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise NetpbmError("missing whitespace after header")
    return out, pos + 1


def decode(data: bytes) -> np.ndarray:
    """Decode P5 (-> (H, W)) or P6 (-> (H, W, 3)) bytes to floats in [0, 1]."""
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported or malformed header {magic!r}")
    (_, w, h, maxval), off = _tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise NetpbmError("non-numeric header field") from None
    if not (0 < w <= MAX_DIM and 0 < h <= MAX_DIM):
        raise NetpbmError(f"dimensions {w}x{h} out of range")
    if maxval != 255:
        raise NetpbmError(f"only 8-bit maxval 255 is supported, got {maxval}")
    ch = 1 if magic == b"P5" else 3
    n = w * h * ch
    pix = np.frombuffer(data, dtype=np.uint8, count=min(n, len(data) - off), offset=off)
    if pix.size != n:
        raise NetpbmError("pixel data truncated")
    shape = (h, w) if ch == 1 else (h, w, 3)
    return pix.reshape(shape).astype(np.float64) / 255.0


def write_pgm(path: str | os.PathLike, grid) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_pgm(grid))


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P5":
        raise NetpbmError(f"{path}: not a binary PGM (P5) file")
    return decode(data)


def write_ppm(path: str | os.PathLike, rgb) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(rgb))


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:2] != b"P6":
        raise NetpbmError(f"{path}: not a binary PPM (P6) file")
    return decode(data)
