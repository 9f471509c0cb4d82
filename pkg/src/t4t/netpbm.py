"""Binary PPM (P6) / PGM (P5) reading and writing.

8-bit samples are single bytes; 16-bit samples are big-endian, as the
Netpbm format requires.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


class NetpbmError(ValueError):
    pass


def write_ppm(path, rgb: np.ndarray) -> None:
    """``rgb`` is ``[H, W, 3]`` uint8."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise NetpbmError(f"PPM needs [H,W,3], got {rgb.shape}")
    h, w, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + rgb.astype(np.uint8).tobytes())


def write_pgm(path, gray: np.ndarray, maxval: int = None) -> None:
    """``gray`` is ``[H, W]``; uint16 input (or ``maxval > 255``) writes 16-bit."""
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise NetpbmError(f"PGM needs [H,W], got {gray.shape}")
    if maxval is None:
        maxval = 65535 if gray.dtype == np.uint16 else 255
    h, w = gray.shape
    if maxval > 255:
        payload = gray.astype(">u2").tobytes()
    else:
        payload = gray.astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode() + payload)


def _header(data: bytes, magic: bytes) -> tuple:
    if data[:2] != magic:
        raise NetpbmError(f"expected {magic!r} header, got {data[:2]!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
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
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace before raster
    w, h, maxval = fields
    return w, h, maxval, pos


def _check_length(path, data: bytes, pos: int, need: int) -> None:
    if len(data) - pos < need:
        raise NetpbmError(f"{path}: raster truncated ({len(data) - pos} of {need} bytes)")


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, maxval, pos = _header(data, b"P6")
    if maxval > 255:
        raise NetpbmError("16-bit PPM is not supported")
    _check_length(path, data, pos, w * h * 3)
    raster = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raster.reshape(h, w, 3).copy()


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    w, h, maxval, pos = _header(data, b"P5")
    _check_length(path, data, pos, w * h * (2 if maxval > 255 else 1))
    if maxval > 255:
        raster = np.frombuffer(data, dtype=">u2", count=w * h, offset=pos).astype(np.uint16)
    else:
        raster = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).copy()
    return raster.reshape(h, w)
