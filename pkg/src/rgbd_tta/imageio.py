"""Binary Netpbm readers/writers: P6 (RGB, maxval 255) and P5 (16-bit grey, big-endian)."""
from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def _header(data: bytes) -> tuple[bytes, list[int], int]:
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise NetpbmError("truncated header")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates maxval from the raster
    return tokens[0], [int(t) for t in tokens[1:]], pos + 1


def read_netpbm(path) -> np.ndarray:
    """Returns [H,W] (P5) or [H,W,3] (P6) as uint8 or uint16."""
    data = Path(path).read_bytes()
    magic, (w, h, maxval), off = _header(data)
    if magic not in (b"P5", b"P6"):
        raise NetpbmError(f"unsupported magic {magic!r}")
    if not 0 < maxval < 65536:
        raise NetpbmError(f"bad maxval {maxval}")
    ch = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h * ch
    raw = data[off:off + n * dtype.itemsize]
    if len(raw) != n * dtype.itemsize:
        raise NetpbmError("truncated raster")
    img = np.frombuffer(raw, dtype=dtype).astype(np.uint16 if maxval > 255 else np.uint8)
    return img.reshape((h, w, 3) if ch == 3 else (h, w))


def write_ppm(path, rgb: np.ndarray) -> None:
    """``rgb``: [H,W,3] uint8."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise NetpbmError("write_ppm expects an [H,W,3] uint8 array")
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.tobytes())


def write_pgm16(path, img: np.ndarray) -> None:
    """``img``: [H,W] integers in [0, 65535], stored big-endian."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise NetpbmError("write_pgm16 expects a 2-D array")
    if img.min(initial=0) < 0 or img.max(initial=0) > 65535:
        raise NetpbmError("values out of 16-bit range")
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + img.astype(">u2").tobytes())
