"""Datasets: synthetic rectangles, IDX ingestion, and measured training sets."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import measurements as meas
from .measurements import MeasurementSpec

IDX_UBYTE_3D = 0x00000803


class FormatError(ValueError):
    """Malformed file; ``offset`` is the byte position where parsing failed."""

    def __init__(self, message: str, offset: int = 0):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def synth_rectangles_dataset(s: int, H: int, W: int, rng: np.random.Generator) -> np.ndarray:
    """``s`` binary images, each one white axis-aligned rectangle on black.

    Side lengths are uniform integers in ``[H//4, H//2]`` (resp. ``W``) and the
    position is uniform over placements that fit.
    """
    if H < 8 or W < 8 or s < 1:
        raise ValueError(f"need H, W >= 8 and s >= 1, got s={s}, H={H}, W={W}")
    hs = rng.integers(H // 4, H // 2 + 1, size=s)
    ws = rng.integers(W // 4, W // 2 + 1, size=s)
    rows = rng.integers(0, H - hs + 1)
    cols = rng.integers(0, W - ws + 1)
    r = np.arange(H)[None, :, None]
    c = np.arange(W)[None, None, :]
    inside = ((r >= rows[:, None, None]) & (r < (rows + hs)[:, None, None])
              & (c >= cols[:, None, None]) & (c < (cols + ws)[:, None, None]))
    return inside.astype(np.float32)


def load_idx(path) -> np.ndarray:
    """Read an unsigned-byte 3-D IDX file into float32 values scaled to [0, 1]."""
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise FormatError("file too short for the IDX magic number", len(raw))
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != IDX_UBYTE_3D:
        raise FormatError(f"expected magic 0x{IDX_UBYTE_3D:08x}, found 0x{magic:08x}", 0)
    if len(raw) < 16:
        raise FormatError("truncated dimension header", len(raw))
    dims = struct.unpack(">III", raw[4:16])
    n = int(np.prod(dims))
    if len(raw) - 16 < n:
        raise FormatError(f"expected {n} pixel bytes, found {len(raw) - 16}", len(raw))
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n, offset=16)
    return (pixels.reshape(dims) / np.float32(255.0)).astype(np.float32)


def write_idx(images: np.ndarray, path) -> None:
    """Write uint8 ``images`` of shape ``(s, H, W)`` as IDX."""
    images = np.asarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ValueError("IDX writer expects (s, H, W)")
    Path(path).write_bytes(struct.pack(">IIII", IDX_UBYTE_3D, *images.shape) + images.tobytes())


@dataclass
class Dataset:
    """Measured training items plus the clean evaluation holdout.

    ``measured[i] == apply_measurement(thetas[i], clean[i])`` for the training
    partition; ``holdout`` is the clean tail of the corpus.
    """
    measured: np.ndarray
    holdout: np.ndarray
    spec: MeasurementSpec
    seed: int
    thetas: list = field(default_factory=list, repr=False)


def make_measured_dataset(clean: np.ndarray, spec: MeasurementSpec, seed: int,
                          train_fraction: float = 0.8) -> Dataset:
    """Measure the first 80% of ``clean`` (one fresh Θ per image) and hold out the rest."""
    clean = np.asarray(clean, dtype=np.float32)
    n_train = int(round(train_fraction * len(clean)))
    if n_train < 1 or n_train >= len(clean):
        raise ValueError(f"cannot split {len(clean)} images into nonempty train/holdout parts")
    train, holdout = clean[:n_train], clean[n_train:]
    rng = np.random.Generator(np.random.PCG64(seed))
    thetas = meas.sample_thetas(spec, train.shape[1:], n_train, rng)
    measured = meas.apply_batch(thetas, train).astype(np.float32)
    return Dataset(measured, holdout.copy(), spec, seed, thetas)
