"""Pyramidal slide bundles: container I/O, region reads, synthetic slides.

A bundle is a directory holding ``manifest.json`` plus one raw RGB8
row-major file per pyramid level. Level ``k`` is the level-0 raster
downsampled by ``2**k`` (ceil dimensions), so a "32x downsampled" raster is
level 5 and a "128x downsampled" one is level 7. Files are uncompressed so
round-trips are bit-exact and region reads can be served from a memory map
without decoding.

Out-of-bounds region reads pad with white (255,255,255), the background
color of stained-slide scans, so tiles hanging off the slide edge behave
like background.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_NAME = "manifest.json"
WHITE = 255

# Tint applied to tumor lesions by the synthesizer. Red deliberately
# dominates green so a color-based detector can recover lesions, while
# ordinary tissue keeps green above red.
TUMOR_TINT = (0.80, 0.55, 0.72)
DEFAULT_STAIN_TINT = (0.70, 0.75, 0.88)


class MissingLevel(Exception):
    """A pyramid level (or its raster file) is absent."""


class SizeMismatch(Exception):
    """A level raster file does not have the declared byte length."""


class CorruptManifest(Exception):
    """manifest.json is unreadable or internally inconsistent."""


class BadLevel(Exception):
    """Requested level index outside the bundle's pyramid."""


class EmptyIntersection(Exception):
    """Requested region does not intersect the level bounds."""


class SpecOutOfBounds(Exception):
    """Synthetic spec places a lesion outside the image."""


@dataclass(frozen=True)
class LevelInfo:
    level: int
    width: int
    height: int

    @property
    def downsample(self) -> int:
        return 1 << self.level


@dataclass
class SyntheticSpec:
    """Parameters for a deterministic synthetic slide.

    ``tumor_lesions`` is a list of ``((cx, cy), radius)`` disks in level-0
    pixels; every disk must lie fully inside the image.
    """

    seed: int
    width_0: int
    height_0: int
    tissue_blobs: int = 1
    tumor_lesions: list = field(default_factory=list)
    stain_tint: tuple = DEFAULT_STAIN_TINT


@dataclass
class AnnotationMask:
    """Boolean tumor raster aligned with one pyramid level of a slide."""

    slide_id: str
    level: int
    grid: np.ndarray  # bool, (height, width)


class SlideBundle:
    """Open handle on a bundle directory; levels are memory-mapped."""

    def __init__(self, slide_id: str, levels: list[LevelInfo], path: Path,
                 rasters: list[np.ndarray]):
        self.id = slide_id
        self.levels = levels
        self.path = path
        self._rasters = rasters

    @property
    def width(self) -> int:
        return self.levels[0].width

    @property
    def height(self) -> int:
        return self.levels[0].height

    def level_for_downsample(self, downsample: int) -> LevelInfo:
        """Return the level whose downsample factor equals ``downsample``."""
        k = int(math.log2(downsample))
        if (1 << k) != downsample or k >= len(self.levels):
            raise MissingLevel(
                f"bundle {self.id!r} has no level at downsample {downsample}")
        return self.levels[k]

    def level_raster(self, level: int) -> np.ndarray:
        """Whole raster of one level (read-only view)."""
        if not 0 <= level < len(self.levels):
            raise BadLevel(f"level {level} not in [0, {len(self.levels)})")
        return self._rasters[level]

    def read_region(self, level: int, x: int, y: int, w: int, h: int) -> np.ndarray:
        """Read a ``w`` x ``h`` RGB window at ``(x, y)`` of ``level``.

        Pixels outside the level bounds are white. The rectangle must
        intersect the bounds. Returns a fresh uint8 array of shape
        ``(h, w, 3)``; reads are pure and safe to issue concurrently.
        """
        if not 0 <= level < len(self.levels):
            raise BadLevel(f"level {level} not in [0, {len(self.levels)})")
        info = self.levels[level]
        x0, y0 = max(x, 0), max(y, 0)
        x1, y1 = min(x + w, info.width), min(y + h, info.height)
        if w <= 0 or h <= 0 or x0 >= x1 or y0 >= y1:
            raise EmptyIntersection(
                f"region ({x},{y},{w},{h}) misses level {level} "
                f"bounds {info.width}x{info.height}")
        out = np.full((h, w, 3), WHITE, dtype=np.uint8)
        out[y0 - y:y1 - y, x0 - x:x1 - x] = self._rasters[level][y0:y1, x0:x1]
        return out


def _level_dims(width_0: int, height_0: int, level: int) -> tuple[int, int]:
    f = 1 << level
    return (width_0 + f - 1) // f, (height_0 + f - 1) // f


def _level_filename(level: int) -> str:
    return f"level_{level}.rgb"


def box_downsample(raster: np.ndarray) -> np.ndarray:
    """2x box filter of an RGB8 raster; odd trailing rows/cols average the
    pixels that exist. Rounds half away from zero."""
    h, w = raster.shape[:2]
    padded = raster
    if h % 2 or w % 2:
        # edge replication makes the 4-term mean equal the mean of the
        # available pixels in truncated blocks
        padded = np.pad(raster, ((0, h % 2), (0, w % 2), (0, 0)), mode="edge")
    s = (padded[0::2, 0::2].astype(np.uint16)
         + padded[1::2, 0::2]
         + padded[0::2, 1::2]
         + padded[1::2, 1::2])
    return ((s + 2) >> 2).astype(np.uint8)


def build_pyramid(level0: np.ndarray, n_levels: int) -> list[np.ndarray]:
    """Successive 2x box downsamples of ``level0``; ``n_levels`` rasters."""
    rasters = [np.ascontiguousarray(level0, dtype=np.uint8)]
    for _ in range(1, n_levels):
        rasters.append(box_downsample(rasters[-1]))
    return rasters


def write_bundle(path, slide_id: str, level0: np.ndarray,
                 n_levels: int = 8) -> SlideBundle:
    """Write a bundle directory from a level-0 raster and reopen it.

    The pyramid is generated by repeated 2x box downsampling. ``level0``
    must be uint8 with shape ``(height, width, 3)``.
    """
    if level0.ndim != 3 or level0.shape[2] != 3:
        raise ValueError("level0 raster must be (h, w, 3)")
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    rasters = build_pyramid(level0, n_levels)
    levels = []
    for k, raster in enumerate(rasters):
        h, w = raster.shape[:2]
        (path / _level_filename(k)).write_bytes(raster.tobytes())
        levels.append({"level": k, "width": w, "height": h,
                       "file": _level_filename(k)})
    manifest = {"id": slide_id, "levels": levels}
    (path / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2) + "\n")
    return read_bundle(path)


def read_bundle(path) -> SlideBundle:
    """Open a bundle directory, validating the manifest and file sizes.

    Raises ``CorruptManifest`` for unparseable or inconsistent manifests,
    ``MissingLevel`` for absent level files and ``SizeMismatch`` when a
    raster file length disagrees with the declared dimensions.
    """
    path = Path(path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.is_file():
        raise CorruptManifest(f"no {MANIFEST_NAME} in {path}")
    try:
        manifest = json.loads(manifest_path.read_text())
        slide_id = manifest["id"]
        entries = manifest["levels"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptManifest(f"bad manifest in {path}: {exc}") from exc
    if not entries:
        raise CorruptManifest(f"manifest in {path} declares no levels")

    levels: list[LevelInfo] = []
    rasters: list[np.ndarray] = []
    w0 = h0 = None
    for k, entry in enumerate(entries):
        try:
            level, w, h, fname = (entry["level"], entry["width"],
                                  entry["height"], entry["file"])
        except (KeyError, TypeError) as exc:
            raise CorruptManifest(f"bad level entry {k} in {path}") from exc
        if level != k or w < 1 or h < 1:
            raise CorruptManifest(
                f"levels must be contiguous from 0 with positive dims; "
                f"entry {k} is {entry}")
        if k == 0:
            w0, h0 = w, h
        elif (w, h) != _level_dims(w0, h0, k):
            raise CorruptManifest(
                f"level {k} dims {w}x{h} inconsistent with level 0 "
                f"{w0}x{h0}")
        fpath = path / fname
        if not fpath.is_file():
            raise MissingLevel(f"level {k} raster {fname} missing in {path}")
        expected = w * h * 3
        actual = fpath.stat().st_size
        if actual != expected:
            raise SizeMismatch(
                f"level {k} raster {fname}: {actual} bytes, expected {expected}")
        mm = np.memmap(fpath, dtype=np.uint8, mode="r", shape=(h, w, 3))
        levels.append(LevelInfo(level=k, width=w, height=h))
        rasters.append(mm)
    return SlideBundle(slide_id, levels, path, rasters)


def read_region(bundle: SlideBundle, level: int, x: int, y: int,
                w: int, h: int) -> np.ndarray:
    return bundle.read_region(level, x, y, w, h)


def synthesize_slide(spec: SyntheticSpec, dest, slide_id: str = "synthetic",
                     n_levels: int = 8) -> tuple[SlideBundle, AnnotationMask]:
    """Render a synthetic slide to ``dest`` and return it with its tumor mask.

    Deterministic for a fixed seed: near-white gray background, elliptical
    tissue blobs in the stain tint, tumor disks in a distinct red-dominant
    tint with multiplicative speckle. Background pixels stay gray (equal
    channels); tissue keeps green above red; tumor keeps red above green.
    """
    w, h = spec.width_0, spec.height_0
    for (cx, cy), r in spec.tumor_lesions:
        if r <= 0:
            raise SpecOutOfBounds(f"lesion radius {r} not positive")
        if cx - r < 0 or cy - r < 0 or cx + r >= w or cy + r >= h:
            raise SpecOutOfBounds(
                f"lesion at ({cx},{cy}) r={r} exceeds {w}x{h} bounds")

    rng = np.random.default_rng(spec.seed)
    yy, xx = np.mgrid[0:h, 0:w]

    gray = (248 + rng.integers(-4, 5, size=(h, w))).astype(np.float64)
    img = np.repeat(gray[:, :, None], 3, axis=2)

    shade = rng.uniform(0.92, 1.0, size=(h, w))
    tint = np.asarray(spec.stain_tint, dtype=np.float64)
    for _ in range(spec.tissue_blobs):
        cx = rng.uniform(0.2, 0.8) * w
        cy = rng.uniform(0.2, 0.8) * h
        ax = rng.uniform(0.14, 0.30) * min(w, h)
        ay = rng.uniform(0.14, 0.30) * min(w, h)
        theta = rng.uniform(0, np.pi)
        dx, dy = xx - cx, yy - cy
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        inside = (u / ax) ** 2 + (v / ay) ** 2 <= 1.0
        img[inside] = 255.0 * tint * shade[inside][:, None]

    mask = np.zeros((h, w), dtype=bool)
    tumor = np.asarray(TUMOR_TINT, dtype=np.float64)
    for (cx, cy), r in spec.tumor_lesions:
        inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= r * r
        img[inside] = 255.0 * tumor * shade[inside][:, None]
        mask |= inside

    level0 = np.clip(np.floor(img + 0.5), 0, 255).astype(np.uint8)
    bundle = write_bundle(dest, slide_id, level0, n_levels=n_levels)
    return bundle, AnnotationMask(slide_id=slide_id, level=0, grid=mask)
