"""Binary PPM (P6) / PGM (P5) readers and writers, 8-bit only.

These two formats are the package's sole image interchange: they are
byte-exact, dependency-free, and easy to regenerate bit-identically.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import DataError


def _write_pnm(path, magic: bytes, arr: np.ndarray) -> None:
    if arr.dtype != np.uint8:
        raise ValueError(f"expected uint8 pixels, got {arr.dtype}")
    h, w = arr.shape[:2]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(magic + b"\n%d %d\n255\n" % (w, h))
        f.write(arr.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) uint8 array as binary PPM."""
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"PPM needs (H,W,3), got {rgb.shape}")
    _write_pnm(path, b"P6", rgb)


def write_pgm(path, gray: np.ndarray) -> None:
    """Write an (H, W) uint8 array as binary PGM."""
    if gray.ndim != 2:
        raise ValueError(f"PGM needs (H,W), got {gray.shape}")
    _write_pnm(path, b"P5", gray)


def _read_header_tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read `count` whitespace-separated tokens, honoring '#' comments."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < count:
        if i >= len(data):
            raise DataError("truncated PNM header")
        ch = data[i:i + 1]
        if ch == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
        elif ch.isspace():
            i += 1
        else:
            j = i
            while j < len(data) and not data[j:j + 1].isspace():
                j += 1
            tokens.append(data[i:j])
            i = j
    return tokens, i + 1  # header ends after exactly one whitespace byte


def _read_pnm(path, magic: bytes, channels: int) -> np.ndarray:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read {path}: {e}") from e
    tokens, offset = _read_header_tokens(data, 4)
    if tokens[0] != magic:
        raise DataError(f"{path}: expected {magic.decode()} file, got {tokens[0]!r}")
    try:
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    except ValueError as e:
        raise DataError(f"{path}: malformed header") from e
    if maxval != 255:
        raise DataError(f"{path}: only maxval 255 supported, got {maxval}")
    n = w * h * channels
    body = data[offset:offset + n]
    if len(body) != n:
        raise DataError(f"{path}: expected {n} pixel bytes, found {len(body)}")
    arr = np.frombuffer(body, dtype=np.uint8)
    return arr.reshape((h, w, channels) if channels > 1 else (h, w))


def read_ppm(path) -> np.ndarray:
    """Read a binary PPM into an (H, W, 3) uint8 array."""
    return _read_pnm(path, b"P6", 3)


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM into an (H, W) uint8 array."""
    return _read_pnm(path, b"P5", 1)


def to_float_chw(rgb_u8: np.ndarray) -> np.ndarray:
    """(H,W,3) uint8 -> (3,H,W) float64 in [0,1]."""
    return rgb_u8.astype(np.float64).transpose(2, 0, 1) / 255.0


def to_u8_hwc(img_chw: np.ndarray) -> np.ndarray:
    """(3,H,W) float in [0,1] -> (H,W,3) uint8 with round-half-away quantization."""
    clipped = np.clip(img_chw, 0.0, 1.0)
    return (clipped * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def gray_to_float(gray_u8: np.ndarray) -> np.ndarray:
    return gray_u8.astype(np.float64) / 255.0


def gray_to_u8(gray: np.ndarray) -> np.ndarray:
    return (np.clip(gray, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
