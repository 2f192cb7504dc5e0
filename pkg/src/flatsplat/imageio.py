"""PPM (P6, 8-bit) export and lossless float64 sidecars."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ContractError, ShapeError


def quantize(img: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and round half to even onto 0..255."""
    return np.rint(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ShapeError(f"expected (H, W, 3) image, got {img.shape}")
    data = img if img.dtype == np.uint8 else quantize(img)
    h, w = data.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + data.tobytes()


def decode_ppm(buf: bytes) -> np.ndarray:
    """Parse a binary P6 PPM into a uint8 (H, W, 3) array."""
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    pos += 1  # single whitespace byte before the raster
    if tokens[0] != b"P6":
        raise ContractError("not a binary PPM (P6)")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ContractError("only 8-bit PPM is supported")
    raster = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos)
    return raster.reshape(h, w, 3).copy()


def write_ppm(path, img: np.ndarray) -> None:
    Path(path).write_bytes(encode_ppm(img))


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_f64(path, img: np.ndarray) -> None:
    """Raw little-endian float64 dump, row-major (H, W, 3); no header."""
    Path(path).write_bytes(np.ascontiguousarray(img, dtype="<f8").tobytes())


def read_f64(path, width: int, height: int) -> np.ndarray:
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<f8")
    if raw.size != width * height * 3:
        raise ShapeError(f"{path}: expected {width * height * 3} values, found {raw.size}")
    return raw.astype(np.float64).reshape(height, width, 3)
