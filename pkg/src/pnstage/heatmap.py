"""Tumor probability heatmaps: overlap-tile stitching, thresholded
regions, and the 11-feature summary vector per slide.

The heatmap lives on a 128-px cell grid (``ceil(level0_dims / 128)``).
Stitching scores 256x256 patches on a stride-128 grid whose tiles may
overhang the slide edge (overhang reads pad white), so every cell is
fully contained by 1, 2 or 4 patches — exactly 4 in the interior, fewer
only on the top/left edges. A cell's value is the mean of its covering
patches; because the counts are powers of two and the summation is
grouped pairwise, a constant scorer propagates to cell values exactly.
Cells outside the tissue mask are forced to 0.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .roi import TissueMask
from .scoring import ScoreItem, score_batch
from .slide_io import SlideBundle

CELL_SIZE = 128
DEFAULT_THRESHOLD = 0.9
HEATMAP_MAGIC = b"HMAP"
FEATURE_NAMES = tuple(f"f{i}" for i in range(1, 12))

_EIGHT_CONNECTED = np.ones((3, 3), dtype=int)


class BadHeatmapFile(Exception):
    """Heatmap file has a wrong magic or is truncated."""


@dataclass
class Heatmap:
    slide_id: str
    grid: np.ndarray  # float32, (height_cells, width_cells)
    cell_size: int = CELL_SIZE


@dataclass(frozen=True)
class Region:
    """One 8-connected component of super-threshold heatmap cells."""

    cells: frozenset  # of (row, col)
    max_prob: float
    mean_prob: float
    area: int
    major_axis_len: float


@dataclass(frozen=True)
class RegionFeatureVector:
    """Slide summary features over the thresholded heatmap.

    f1 largest region major axis, f2/f3 its max/mean probability, f4 its
    area, f5 mean over regions of region mean probability, f6 total region
    area, f7/f8 max/mean probability over tissue cells, f9 region count,
    f10 tissue cell count, f11 tissue/non-tissue cell ratio.
    """

    f1: float
    f2: float
    f3: float
    f4: float
    f5: float
    f6: float
    f7: float
    f8: float
    f9: float
    f10: float
    f11: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in FEATURE_NAMES], dtype=np.float64)


def cell_grid_shape(width_0: int, height_0: int, cell_size: int = CELL_SIZE):
    return ((height_0 + cell_size - 1) // cell_size,
            (width_0 + cell_size - 1) // cell_size)


def tissue_cells(tissue: TissueMask, width_0: int, height_0: int,
                 cell_size: int = CELL_SIZE) -> np.ndarray:
    """Project a tissue mask onto the heatmap cell grid.

    A cell counts as tissue when any mask pixel inside its footprint is
    tissue."""
    ds = 1 << tissue.level
    if cell_size % ds:
        raise ValueError(f"cell size {cell_size} not a multiple of mask "
                         f"downsample {ds}")
    f = cell_size // ds
    hc, wc = cell_grid_shape(width_0, height_0, cell_size)
    grid = tissue.grid
    padded = np.zeros((hc * f, wc * f), dtype=bool)
    padded[:grid.shape[0], :grid.shape[1]] = grid
    return padded.reshape(hc, f, wc, f).any(axis=(1, 3))


def _covered_cell_range(g: np.ndarray, stride: int, n_cells: int):
    """Cells whose footprint a patch at grid index g fully contains."""
    px = g * stride
    lo = (px + CELL_SIZE - 1) // CELL_SIZE
    hi = np.minimum((px + CELL_SIZE) // CELL_SIZE, n_cells - 1)
    return lo, hi


def stitch_heatmap(bundle: SlideBundle, tissue: TissueMask, scorer,
                   stride: int = CELL_SIZE, overlap: str = "half") -> Heatmap:
    """Score tissue-covering patches and merge them into a heatmap.

    overlap="half" scores 256-px tiles every ``stride`` (default 128) px;
    each cell becomes the mean of the patches fully containing it.
    overlap="none" spaces tiles at 256 px so each cell has exactly one
    covering patch. Only patches containing at least one tissue cell are
    scored; non-tissue cells are 0.
    """
    if overlap not in ("half", "none"):
        raise ValueError(f"overlap must be 'half' or 'none', got {overlap!r}")
    if CELL_SIZE % stride:
        raise ValueError(f"stride {stride} must divide cell size {CELL_SIZE}")
    patch_stride = stride if overlap == "half" else 2 * CELL_SIZE
    hc, wc = cell_grid_shape(bundle.width, bundle.height)
    cell_tissue = tissue_cells(tissue, bundle.width, bundle.height)

    # patch grid: index g maps to level-0 offset g*patch_stride; the last
    # patch starts at the last cell's origin (it may overhang the slide)
    gw = (wc - 1) * CELL_SIZE // patch_stride + 1
    gh = (hc - 1) * CELL_SIZE // patch_stride + 1

    gy, gx = np.mgrid[0:gh, 0:gw]
    sel = np.zeros((gh, gw), dtype=bool)
    cx_lo, cx_hi = _covered_cell_range(gx, patch_stride, wc)
    cy_lo, cy_hi = _covered_cell_range(gy, patch_stride, hc)
    for dr in (0, 1):
        rr = np.minimum(cy_lo + dr, cy_hi)
        for dc in (0, 1):
            cc = np.minimum(cx_lo + dc, cx_hi)
            sel |= cell_tissue[rr, cc]

    order = np.argwhere(sel)  # row-major (gy, gx) pairs
    items = []
    for py, px in order:
        x, y = int(px) * patch_stride, int(py) * patch_stride
        raster = bundle.read_region(0, x, y, 2 * CELL_SIZE, 2 * CELL_SIZE) \
            if scorer.needs_pixels else None
        items.append(ScoreItem(bundle.id, x, y, raster))
    scores = score_batch(scorer, items)

    probs = np.zeros((gh, gw), dtype=np.float64)
    probs[sel] = [s.prob for s in scores]

    # covering patch indices of a cell at origin c*128: every grid index g
    # with g*ps <= c*128 and g*ps + 256 >= (c+1)*128, clipped to g >= 0
    def slot_bounds(idx):
        hi = (idx * CELL_SIZE) // patch_stride
        lo = np.maximum((idx * CELL_SIZE - CELL_SIZE + patch_stride - 1)
                        // patch_stride, 0)
        return lo, hi

    row_lo, row_hi = slot_bounds(np.arange(hc)[:, None])
    col_lo, col_hi = slot_bounds(np.arange(wc)[None, :])
    n_slots = CELL_SIZE // patch_stride + 1
    total = None
    count = None
    for dy in range(n_slots):
        gys = row_hi - dy
        ok_y = gys >= row_lo
        row_sum = None
        row_cnt = None
        for dx in range(n_slots):
            gxs = col_hi - dx
            ok = ok_y & (gxs >= col_lo)
            present = ok & sel[gys.clip(0), gxs.clip(0)]
            v = np.where(present, probs[gys.clip(0), gxs.clip(0)], 0.0)
            c = present.astype(np.int64)
            row_sum = v if row_sum is None else row_sum + v
            row_cnt = c if row_cnt is None else row_cnt + c
        total = row_sum if total is None else total + row_sum
        count = row_cnt if count is None else count + row_cnt
    grid = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    grid[~cell_tissue] = 0.0
    return Heatmap(slide_id=bundle.id, grid=grid.astype(np.float32))


def average_heatmaps(heatmaps: list) -> Heatmap:
    """Cellwise mean of heatmaps on identical grids (model ensembling)."""
    if not heatmaps:
        raise ValueError("need at least one heatmap")
    first = heatmaps[0]
    for hm in heatmaps[1:]:
        if hm.grid.shape != first.grid.shape or hm.cell_size != first.cell_size:
            raise ValueError("heatmaps disagree on grid shape or cell size")
    stacked = np.stack([hm.grid.astype(np.float64) for hm in heatmaps])
    return Heatmap(slide_id=first.slide_id,
                   grid=stacked.mean(axis=0).astype(np.float32),
                   cell_size=first.cell_size)


def write_heatmap(path, hm: Heatmap) -> None:
    """HMAP file: magic, u32 width, u32 height, u32 cell_size, then
    width*height little-endian f32 cells, row-major."""
    h, w = hm.grid.shape
    header = HEATMAP_MAGIC + np.array([w, h, hm.cell_size], dtype="<u4").tobytes()
    Path(path).write_bytes(header + hm.grid.astype("<f4").tobytes())


def read_heatmap(path, slide_id: str = "") -> Heatmap:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise BadHeatmapFile(f"{path}: {len(raw)} bytes, header needs 16")
    if raw[:4] != HEATMAP_MAGIC:
        raise BadHeatmapFile(f"{path}: bad magic {raw[:4]!r}")
    w, h, cell = (int(v) for v in np.frombuffer(raw[4:16], dtype="<u4"))
    expected = 16 + 4 * w * h
    if len(raw) < expected:
        raise BadHeatmapFile(f"{path}: {len(raw)} bytes, expected {expected}")
    grid = np.frombuffer(raw[16:expected], dtype="<f4").reshape(h, w)
    return Heatmap(slide_id=slide_id or Path(path).stem, grid=grid.copy(),
                   cell_size=cell)


def write_heatmap_png(path, hm: Heatmap) -> None:
    from PIL import Image
    img = np.floor(hm.grid.astype(np.float64) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(img, mode="L").save(path)


def major_axis(cells) -> float:
    """Major axis length of a cell set: 4*sqrt of the largest eigenvalue
    of the population covariance of cell centers. A single cell is 0."""
    if hasattr(cells, "cells"):
        cells = cells.cells
    pts = np.asarray(sorted(cells), dtype=np.float64)
    if len(pts) == 1:
        return 0.0
    d = pts - pts.mean(axis=0)
    a, b = (d[:, 0] ** 2).mean(), (d[:, 0] * d[:, 1]).mean()
    c = (d[:, 1] ** 2).mean()
    lam_max = (a + c) / 2.0 + np.sqrt(((a - c) / 2.0) ** 2 + b ** 2)
    return float(4.0 * np.sqrt(lam_max))


def threshold_regions(hm: Heatmap, t: float = DEFAULT_THRESHOLD) -> list[Region]:
    """8-connected components of cells with probability >= t."""
    if not 0.0 < t < 1.0:
        raise ValueError(f"threshold {t} outside (0, 1)")
    labels, n = ndimage.label(hm.grid >= t, structure=_EIGHT_CONNECTED)
    regions = []
    for i in range(1, n + 1):
        member = labels == i
        values = hm.grid[member].astype(np.float64)
        cells = frozenset((int(r), int(c)) for r, c in np.argwhere(member))
        regions.append(Region(cells=cells,
                              max_prob=float(values.max()),
                              mean_prob=float(values.mean()),
                              area=int(len(cells)),
                              major_axis_len=major_axis(cells)))
    return regions


def extract_features(hm: Heatmap, tissue_grid: np.ndarray,
                     t: float = DEFAULT_THRESHOLD) -> RegionFeatureVector:
    """Compute the 11-feature vector from a heatmap and its tissue grid.

    ``tissue_grid`` is boolean on the heatmap's cell grid. The largest
    region is chosen by area, ties by max probability, then by earliest
    cell in row-major order.
    """
    if tissue_grid.shape != hm.grid.shape:
        raise ValueError(f"tissue grid {tissue_grid.shape} vs heatmap "
                         f"{hm.grid.shape}")
    regions = threshold_regions(hm, t)
    if regions:
        wcells = hm.grid.shape[1]

        def rank(reg: Region):
            r, c = min(reg.cells)
            return (reg.area, reg.max_prob, -(r * wcells + c))

        largest = max(regions, key=rank)
        f1, f2, f3 = largest.major_axis_len, largest.max_prob, largest.mean_prob
        f4 = float(largest.area)
        f5 = float(np.mean([reg.mean_prob for reg in regions]))
        f6 = float(sum(reg.area for reg in regions))
        f9 = float(len(regions))
    else:
        f1 = f2 = f3 = f4 = f5 = f6 = f9 = 0.0
    n_tissue = int(np.count_nonzero(tissue_grid))
    if n_tissue:
        vals = hm.grid[tissue_grid].astype(np.float64)
        f7, f8 = float(vals.max()), float(vals.mean())
    else:
        f7 = f8 = 0.0
    f10 = float(n_tissue)
    n_other = tissue_grid.size - n_tissue
    f11 = float(n_tissue) / n_other if n_other else float(n_tissue)
    return RegionFeatureVector(f1, f2, f3, f4, f5, f6, f7, f8, f9, f10, f11)


def write_features_csv(path, rows: list) -> None:
    """Rows of (slide_id, RegionFeatureVector) to CSV with full-precision
    floats, so rewritten files are byte-identical across runs."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(("slide_id",) + FEATURE_NAMES)
        for slide_id, fv in rows:
            writer.writerow([slide_id] + [repr(v) for v in fv.as_array().tolist()])


def read_features_csv(path) -> list:
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if tuple(header) != ("slide_id",) + FEATURE_NAMES:
            raise ValueError(f"unexpected features header {header}")
        for row in reader:
            out.append((row[0], RegionFeatureVector(*map(float, row[1:]))))
    return out
