"""Patch dataset construction: grid enumeration, labeling, balanced
sampling, geometric and stain augmentation, and the patient split rule.

Patches are 256x256 level-0 tiles on a stride-128 grid. A patch is kept
when its center pixel lands on tissue; it is labeled tumor when more than
75% of its pixels are annotated tumor, normal when none are, and excluded
otherwise so partially-tumor tiles never pollute either class.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .roi import TissueMask
from .slide_io import AnnotationMask, SlideBundle

PATCH_SIZE = 256
PATCH_STRIDE = 128
TUMOR_FRACTION_THRESHOLD = 0.75
MIN_CONTEXT = 362  # smallest square that a rotated 256-crop stays inside

TUMOR = "tumor"
NORMAL = "normal"
EXCLUDED = "excluded"

TRAIN_M = "train-M"  # patients with lesion-level annotation on any slide
TRAIN_L = "train-L"  # patients with slide-level labels only


class MaskMismatch(Exception):
    """Mask does not belong to the bundle or has wrong dimensions."""


class EmptyClass(Exception):
    """No tumor (or no normal) patches available to sample."""


class OddCount(Exception):
    """Balanced sampling needs an even total count."""


class ContextTooSmall(Exception):
    """Augmentation context raster smaller than 362x362."""


@dataclass(frozen=True)
class PatchRef:
    slide_id: str
    x: int
    y: int
    size: int = PATCH_SIZE
    label: str = NORMAL


@dataclass(frozen=True)
class SplitAssignment:
    patient_id: str
    bucket: str  # TRAIN_M or TRAIN_L


@dataclass(frozen=True)
class AugmentationParams:
    """Geometric (offset/flip/rotation) and stain (HSV/brightness/contrast)
    augmentation parameters; defaults are the identity."""

    dx: int = 0
    dy: int = 0
    flip: bool = False
    angle: float = 0.0
    hue_delta: float = 0.0
    sat_factor: float = 1.0
    bright_delta: float = 0.0
    contrast_factor: float = 1.0

    def __post_init__(self):
        checks = [
            (-8 <= self.dx <= 8, "dx in [-8, 8]"),
            (-8 <= self.dy <= 8, "dy in [-8, 8]"),
            (0.0 <= self.angle < 360.0, "angle in [0, 360)"),
            (-0.04 <= self.hue_delta <= 0.04, "hue_delta in [-0.04, 0.04]"),
            (0.75 <= self.sat_factor <= 1.25, "sat_factor in [0.75, 1.25]"),
            (-0.25 <= self.bright_delta <= 0.25, "bright_delta in [-0.25, 0.25]"),
            (0.25 <= self.contrast_factor <= 1.75, "contrast_factor in [0.25, 1.75]"),
        ]
        for ok, what in checks:
            if not ok:
                raise ValueError(f"augmentation parameter outside {what}")


def sample_augmentation_params(rng: np.random.Generator) -> AugmentationParams:
    """Draw one augmentation parameter set from the standard ranges."""
    return AugmentationParams(
        dx=int(rng.integers(-8, 9)),
        dy=int(rng.integers(-8, 9)),
        flip=bool(rng.random() < 0.5),
        angle=float(rng.uniform(0.0, 360.0)),
        hue_delta=float(rng.uniform(-0.04, 0.04)),
        sat_factor=float(rng.uniform(0.75, 1.25)),
        bright_delta=float(rng.uniform(-0.25, 0.25)),
        contrast_factor=float(rng.uniform(0.25, 1.75)),
    )


def enumerate_patches(bundle: SlideBundle, tissue: TissueMask,
                      annot: AnnotationMask | None = None) -> list[PatchRef]:
    """Enumerate the stride-128 grid of fully in-bounds 256x256 patches.

    A patch is kept when its center pixel maps into a true tissue cell.
    Tumor fraction is the exact annotated-pixel count over 256^2.
    """
    if tissue.slide_id != bundle.id:
        raise MaskMismatch(
            f"tissue mask for {tissue.slide_id!r}, bundle is {bundle.id!r}")
    level = bundle.levels[tissue.level]
    if tissue.grid.shape != (level.height, level.width):
        raise MaskMismatch(
            f"tissue grid {tissue.grid.shape} vs level {tissue.level} "
            f"dims {(level.height, level.width)}")
    if annot is not None:
        if annot.slide_id != bundle.id:
            raise MaskMismatch(
                f"annotation for {annot.slide_id!r}, bundle is {bundle.id!r}")
        if annot.level != 0 or annot.grid.shape != (bundle.height, bundle.width):
            raise MaskMismatch("annotation mask must be at level 0 dims")

    ds = level.downsample
    area = PATCH_SIZE * PATCH_SIZE
    refs = []
    for y in range(0, bundle.height - PATCH_SIZE + 1, PATCH_STRIDE):
        cy = (y + PATCH_SIZE // 2) // ds
        for x in range(0, bundle.width - PATCH_SIZE + 1, PATCH_STRIDE):
            cx = (x + PATCH_SIZE // 2) // ds
            if not tissue.grid[cy, cx]:
                continue
            if annot is None:
                label = NORMAL
            else:
                hits = int(np.count_nonzero(
                    annot.grid[y:y + PATCH_SIZE, x:x + PATCH_SIZE]))
                if hits > TUMOR_FRACTION_THRESHOLD * area:
                    label = TUMOR
                elif hits == 0:
                    label = NORMAL
                else:
                    label = EXCLUDED
            refs.append(PatchRef(bundle.id, x, y, PATCH_SIZE, label))
    return refs


def balanced_sample(patches_by_slide: dict, n: int, seed,
                    normals_from_tumor_slides: bool = True) -> list[PatchRef]:
    """Sample ``n`` patches, n/2 tumor + n/2 normal, with replacement.

    Two-stage draw: pick a slide uniformly among slides holding the class,
    then a patch uniformly within that slide, so large slides do not
    dominate. Tumor draws come first, then normal; deterministic for a
    fixed seed. ``normals_from_tumor_slides=False`` restricts normal draws
    to slides without any tumor patch.
    """
    if n % 2:
        raise OddCount(f"n={n} is odd; classes cannot balance")
    tumor_pools = {s: [p for p in ps if p.label == TUMOR]
                   for s, ps in patches_by_slide.items()}
    tumor_pools = {s: ps for s, ps in tumor_pools.items() if ps}
    normal_pools = {}
    for s, ps in patches_by_slide.items():
        if not normals_from_tumor_slides and s in tumor_pools:
            continue
        pool = [p for p in ps if p.label == NORMAL]
        if pool:
            normal_pools[s] = pool
    out = []
    rng = np.random.default_rng(seed)
    for name, pools in ((TUMOR, tumor_pools), (NORMAL, normal_pools)):
        if not pools:
            raise EmptyClass(f"no {name} patches to sample")
        slides = sorted(pools)
        for _ in range(n // 2):
            pool = pools[slides[rng.integers(len(slides))]]
            out.append(pool[rng.integers(len(pool))])
    return out


def _bilinear(img: np.ndarray, xs: np.ndarray, ys: np.ndarray,
              fill: float = 255.0) -> np.ndarray:
    """Sample ``img`` (h, w, 3) at float coords; outside points get fill."""
    h, w = img.shape[:2]
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    fx = (xs - x0)[..., None]
    fy = (ys - y0)[..., None]
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)

    def tap(xi, yi):
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        v = img[yi.clip(0, h - 1), xi.clip(0, w - 1)].astype(np.float64)
        v[~inside] = fill
        return v

    top = tap(x0, y0) * (1 - fx) + tap(x0 + 1, y0) * fx
    bot = tap(x0, y0 + 1) * (1 - fx) + tap(x0 + 1, y0 + 1) * fx
    return top * (1 - fy) + bot * fy


def augment_geometric(context: np.ndarray, params: AugmentationParams) -> np.ndarray:
    """Rotate/translate/flip a patch, sampling from a larger context.

    ``context`` is a square raster of side >= 362 centered on the patch;
    the result is the center 256x256 crop after rotating about the context
    center by ``angle`` degrees (counter-clockwise, bilinear), translating
    by (dx, dy), and optionally flipping horizontally. Samples that leave
    the context fill with white.
    """
    if context.ndim != 3 or context.shape[2] != 3 or context.shape[0] != context.shape[1]:
        raise ContextTooSmall("context must be a square (s, s, 3) raster")
    s = context.shape[0]
    if s < MIN_CONTEXT:
        raise ContextTooSmall(f"context side {s} < {MIN_CONTEXT}")

    off = (s - PATCH_SIZE) // 2
    c = (s - 1) / 2.0
    j = np.arange(PATCH_SIZE, dtype=np.float64)
    qx = (j + off)[None, :] - params.dx - c
    qy = (j + off)[:, None] - params.dy - c
    theta = np.deg2rad(params.angle)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    # inverse of a CCW rotation about the center
    sx = cos_t * qx + sin_t * qy + c
    sy = -sin_t * qx + cos_t * qy + c
    out = _bilinear(context, np.broadcast_to(sx, (PATCH_SIZE, PATCH_SIZE)),
                    np.broadcast_to(sy, (PATCH_SIZE, PATCH_SIZE)))
    out = np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)
    return np.fliplr(out).copy() if params.flip else out


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorized RGB->HSV on float arrays in [0, 1]; h in [0, 1)."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = np.max(rgb, axis=-1)
    minc = np.min(rgb, axis=-1)
    rng = maxc - minc
    s = np.where(maxc > 0, rng / np.where(maxc > 0, maxc, 1), 0.0)
    safe = np.where(rng > 0, rng, 1)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(r == maxc, bc - gc,
                 np.where(g == maxc, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(rng > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, maxc], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Inverse of rgb_to_hsv; float arrays in [0, 1]."""
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    i = i.astype(np.int64) % 6
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


def augment_color(patch: np.ndarray, params: AugmentationParams) -> np.ndarray:
    """Stain color jitter: hue shift (wrapping), saturation scale,
    brightness offset, and per-channel mean-preserving contrast.

    Computed in float64 and re-quantized, so identity parameters return
    the input byte-for-byte.
    """
    x = patch.astype(np.float64) / 255.0
    hsv = rgb_to_hsv(x)
    hsv[..., 0] = (hsv[..., 0] + params.hue_delta) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * params.sat_factor, 0.0, 1.0)
    x = hsv_to_rgb(hsv)
    x = x + params.bright_delta
    mean = x.mean(axis=(0, 1))
    x = (x - mean) * params.contrast_factor + mean
    x = np.clip(x, 0.0, 1.0)
    return np.floor(x * 255.0 + 0.5).astype(np.uint8)


def split_patients(patients: list) -> list[SplitAssignment]:
    """Assign each ``(patient_id, per-slide annotation flags)`` pair to
    train-M when any slide carries lesion-level annotation, else train-L."""
    out = []
    for patient_id, flags in patients:
        bucket = TRAIN_M if any(flags) else TRAIN_L
        out.append(SplitAssignment(patient_id=patient_id, bucket=bucket))
    return out


def write_patch_refs(path, refs: list[PatchRef]) -> None:
    """One JSON object per line: slide_id, x, y, size, label."""
    with open(path, "w") as f:
        for ref in refs:
            f.write(json.dumps(asdict(ref), sort_keys=True) + "\n")


def read_patch_refs(path) -> list[PatchRef]:
    refs = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            refs.append(PatchRef(**json.loads(line)))
    return refs
