"""Tissue ROI extraction by gray-value thresholding at 32x downsample."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .slide_io import SlideBundle

MASK_MAGIC = b"TMSK"
TISSUE_DOWNSAMPLE = 32  # pyramid level 5
DEFAULT_THRESHOLD = 0.8


class BadMagic(Exception):
    """Mask file does not start with the TMSK magic."""


class TruncatedMask(Exception):
    """Mask file shorter than its header declares."""


@dataclass
class TissueMask:
    """Boolean tissue raster at one pyramid level (true = tissue)."""

    slide_id: str
    level: int
    grid: np.ndarray  # bool, (height, width)


def to_gray(rgb: np.ndarray) -> np.ndarray:
    """Rec. 601 luminance of an RGB8 raster, scaled to [0, 1].

    gray = (0.299 R + 0.587 G + 0.114 B) / 255. Computed with integer
    numerators so pure white maps to exactly 1.0 and pure black to 0.0.
    """
    r = rgb[..., 0].astype(np.int64)
    g = rgb[..., 1].astype(np.int64)
    b = rgb[..., 2].astype(np.int64)
    return (299 * r + 587 * g + 114 * b) / 255000.0


def tissue_mask(bundle: SlideBundle, threshold: float = DEFAULT_THRESHOLD) -> TissueMask:
    """Threshold the 32x-downsampled slide into a tissue mask.

    Background on a stained scan is near-white, so a pixel is tissue
    exactly when its gray value falls below ``threshold``.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold {threshold} outside (0, 1]")
    info = bundle.level_for_downsample(TISSUE_DOWNSAMPLE)
    gray = to_gray(bundle.level_raster(info.level))
    return TissueMask(slide_id=bundle.id, level=info.level, grid=gray < threshold)


def write_mask(path, mask: TissueMask | np.ndarray) -> None:
    """Write a boolean raster as a TMSK file.

    Layout: magic ``TMSK``, u32 width, u32 height (little-endian), then
    row-major rows bit-packed LSB-first, each row padded to a whole byte.
    """
    grid = mask.grid if isinstance(mask, TissueMask) else np.asarray(mask)
    if grid.ndim != 2:
        raise ValueError("mask grid must be 2-D")
    h, w = grid.shape
    packed = np.packbits(grid.astype(np.uint8), axis=1, bitorder="little")
    header = MASK_MAGIC + np.array([w, h], dtype="<u4").tobytes()
    Path(path).write_bytes(header + packed.tobytes())


def read_mask(path) -> np.ndarray:
    """Read a TMSK file back into a boolean (height, width) array."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise TruncatedMask(f"{path}: {len(raw)} bytes, header needs 12")
    if raw[:4] != MASK_MAGIC:
        raise BadMagic(f"{path}: bad magic {raw[:4]!r}")
    w, h = np.frombuffer(raw[4:12], dtype="<u4")
    w, h = int(w), int(h)
    row_bytes = (w + 7) // 8
    expected = 12 + row_bytes * h
    if len(raw) < expected:
        raise TruncatedMask(f"{path}: {len(raw)} bytes, expected {expected}")
    packed = np.frombuffer(raw[12:expected], dtype=np.uint8).reshape(h, row_bytes)
    bits = np.unpackbits(packed, axis=1, bitorder="little")[:, :w]
    return bits.astype(bool)
