"""Evaluation stack: slide-level ROC-AUC, lesion-level FROC, patient-level
quadratic weighted kappa, and confusion matrices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .heatmap import Heatmap, threshold_regions
from .staging import PNStage

TUMOR = "tumor"
NORMAL = "normal"
DEFAULT_FP_POINTS = (0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
N_STAGES = len(PNStage)


class SingleClass(Exception):
    """AUC needs both tumor and normal slides."""


class NoGroundTruth(Exception):
    """FROC needs at least one ground-truth region."""


@dataclass(frozen=True)
class ScoredSlide:
    slide_id: str
    label: str  # TUMOR or NORMAL
    score: float  # max heatmap cell


@dataclass(frozen=True)
class LesionDetection:
    """One detection per predicted region: its max-probability cell."""

    slide_id: str
    location: tuple  # (row, col) heatmap cell
    confidence: float


@dataclass(frozen=True)
class GroundTruthRegion:
    slide_id: str
    cells: frozenset  # of (row, col)


def auc(slides: list) -> float:
    """Rank-based (Mann-Whitney) area under the ROC curve; ties count 1/2."""
    scores = np.array([s.score for s in slides], dtype=np.float64)
    is_tumor = np.array([s.label == TUMOR for s in slides], dtype=bool)
    n_pos = int(is_tumor.sum())
    n_neg = len(slides) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise SingleClass(f"need both classes, got {n_pos} tumor / {n_neg} normal")
    ranks = rankdata(scores, method="average")
    u = ranks[is_tumor].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def detections_from_heatmap(hm: Heatmap, t: float = 0.9) -> list:
    """One detection per thresholded region at its max-probability cell
    (earliest such cell in row-major order)."""
    out = []
    for region in threshold_regions(hm, t):
        peak = min(c for c in region.cells
                   if float(hm.grid[c]) == region.max_prob)
        out.append(LesionDetection(hm.slide_id, peak, region.max_prob))
    return out


def froc(detections: list, ground_truth: list, normal_slide_count: int,
         fp_points=DEFAULT_FP_POINTS):
    """Free-response ROC over a confidence-threshold sweep.

    A ground-truth region is hit when any detection at or above the
    threshold lies inside its cell set; any other detection is a false
    positive. False positives per slide average over all slides: those
    carrying ground truth plus ``normal_slide_count`` without. Returns a
    ``(curve, score)`` pair where curve rows are (threshold, fps_per_slide,
    sensitivity) and score is the mean sensitivity at ``fp_points``
    (step-interpolated: best sensitivity reachable at or under each
    false-positive budget).
    """
    fp_points = list(fp_points)
    if not fp_points or sorted(fp_points) != fp_points:
        raise ValueError("fp_points must be nonempty and ascending")
    if not ground_truth:
        raise NoGroundTruth("no ground-truth regions")
    n_slides = len({g.slide_id for g in ground_truth}) + normal_slide_count

    gt_cells = {}
    for g in ground_truth:
        gt_cells.setdefault(g.slide_id, []).append(g)

    def is_hit(det):
        return [g for g in gt_cells.get(det.slide_id, ())
                if tuple(det.location) in g.cells]

    curve = []
    thresholds = sorted({d.confidence for d in detections}, reverse=True)
    for theta in thresholds:
        active = [d for d in detections if d.confidence >= theta]
        hit_regions = set()
        fps = 0
        for det in active:
            hits = is_hit(det)
            if hits:
                hit_regions.update(id(g) for g in hits)
            else:
                fps += 1
        sens = len(hit_regions) / len(ground_truth)
        curve.append((theta, fps / n_slides, sens))

    score_points = []
    for p in fp_points:
        feasible = [sens for _, f, sens in curve if f <= p]
        score_points.append(max(feasible, default=0.0))
    return curve, float(np.mean(score_points))


def quadratic_weighted_kappa(pairs: list) -> float:
    """Five-class quadratic weighted kappa over (reference, predicted)
    pN-stage pairs.

    kappa = 1 - sum(w*O) / sum(w*E) with w_ij = (i-j)^2 / (N-1)^2, O the
    observed count matrix and E the outer product of its marginals scaled
    to the total. A zero denominator (single-class data) returns 1.0 when
    all observations agree, else 0.0.
    """
    if not pairs:
        raise ValueError("kappa needs at least one pair")
    o = np.zeros((N_STAGES, N_STAGES), dtype=np.float64)
    for ref, pred in pairs:
        o[int(ref), int(pred)] += 1
    total = o.sum()
    e = np.outer(o.sum(axis=1), o.sum(axis=0)) / total
    i = np.arange(N_STAGES, dtype=np.float64)
    w = (i[:, None] - i[None, :]) ** 2 / (N_STAGES - 1) ** 2
    den = (w * e).sum()
    if den == 0.0:
        return 1.0 if (o * w).sum() == 0.0 else 0.0
    return float(1.0 - (w * o).sum() / den)


def confusion_matrix(pairs: list, n_classes: int = 4):
    """Counts (rows = reference, columns = predicted) plus row-normalized
    percentages."""
    if not pairs:
        raise ValueError("confusion matrix needs at least one pair")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    for ref, pred in pairs:
        counts[int(ref), int(pred)] += 1
    row_sums = counts.sum(axis=1, keepdims=True)
    with np.errstate(invalid="ignore"):
        percents = np.where(row_sums > 0, 100.0 * counts / row_sums, 0.0)
    return counts, percents
