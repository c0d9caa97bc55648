"""Binary PGM (P5) sample grids."""
from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .data import FormatError
from .persist import atomic_write_bytes

SEPARATOR = 128


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1] and map to 0..255 with round-half-up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def tile_grid(samples: np.ndarray, cols: int) -> np.ndarray:
    """Tile ``(n, H, W)`` samples row-major with 1-pixel separators; empty cells are separator grey."""
    samples = np.asarray(samples)
    if samples.ndim != 3 or len(samples) < 1:
        raise ValueError(f"expected a nonempty (n, H, W) stack, got {samples.shape}")
    if cols < 1:
        raise ValueError("cols must be >= 1")
    n, H, W = samples.shape
    rows = math.ceil(n / cols)
    grid = np.full((rows * H + rows - 1, cols * W + cols - 1), SEPARATOR, dtype=np.uint8)
    tiles = to_bytes(samples)
    for i in range(n):
        r, c = divmod(i, cols)
        grid[r * (H + 1):r * (H + 1) + H, c * (W + 1):c * (W + 1) + W] = tiles[i]
    return grid


def encode_pgm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels, dtype=np.uint8)
    h, w = pixels.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_image_grid(samples: np.ndarray, cols: int, path) -> None:
    atomic_write_bytes(path, encode_pgm(tile_grid(samples, cols)))


def read_pgm(path) -> np.ndarray:
    """Parse a P5 file with maxval 255 into a uint8 array."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header", pos)
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P5" or tokens[3] != b"255":
        raise FormatError("only P5 with maxval 255 is supported", 0)
    w, h = int(tokens[1]), int(tokens[2])
    body = raw[pos:pos + w * h]
    if len(body) != w * h:
        raise FormatError(f"expected {w * h} pixel bytes, found {len(body)}", pos)
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)
