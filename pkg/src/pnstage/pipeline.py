"""Per-slide and per-cohort orchestration shared by the CLI and tests.

``run_pipeline`` is the end-to-end driver: it materializes every stage as
files under an output directory (masks/, heatmaps/, features.csv,
predictions.csv, stages.csv, report.json) and skips work whose artifact
already exists, so an interrupted run resumes where it stopped. Stage
failures surface as ``StageError`` tagged with the stage name.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import forest as forest_mod
from . import heatmap as hm_mod
from . import metrics as metrics_mod
from . import roi
from . import staging as staging_mod
from .cohort import CohortInfo, iter_slides, load_annotations, load_cohort, open_bundle
from .heatmap import Heatmap, RegionFeatureVector
from .roi import TissueMask
from .slide_io import SlideBundle
from .staging import NodeClass

STAGES = ("cohort", "roi", "heatmap", "features", "forest", "staging", "eval")


class StageError(Exception):
    """A pipeline stage failed; ``stage`` names which one."""

    def __init__(self, stage: str, cause):
        super().__init__(f"{stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class SlideResult:
    patient_id: str
    slide_id: str
    reference_class: NodeClass
    tissue: TissueMask
    heatmap: Heatmap
    features: RegionFeatureVector


def slide_features(bundle: SlideBundle, scorer, roi_threshold: float = 0.8,
                   t: float = 0.9, overlap: str = "half",
                   stride: int = 128):
    """ROI -> heatmap -> features for one slide.

    Returns (tissue mask, heatmap, tissue cell grid, feature vector).
    """
    tissue = roi.tissue_mask(bundle, roi_threshold)
    hm = hm_mod.stitch_heatmap(bundle, tissue, scorer, stride=stride,
                               overlap=overlap)
    cells = hm_mod.tissue_cells(tissue, bundle.width, bundle.height)
    fv = hm_mod.extract_features(hm, cells, t=t)
    return tissue, hm, cells, fv


def cohort_features(cohort: CohortInfo, scorer, roi_threshold: float = 0.8,
                    t: float = 0.9, overlap: str = "half",
                    workers: int = 1) -> list:
    """Run the per-slide pipeline over a cohort; one SlideResult per slide,
    in manifest order. ``workers`` > 1 maps slides over a thread pool
    (built-in scorers are reentrant; the external client serializes its
    requests internally)."""
    pairs = list(iter_slides(cohort))

    def run(pair):
        patient, slide = pair
        bundle = open_bundle(cohort, slide)
        tissue, hm, _, fv = slide_features(bundle, scorer, roi_threshold,
                                           t, overlap)
        return SlideResult(patient_id=patient.patient_id,
                           slide_id=slide.slide_id,
                           reference_class=slide.node_class,
                           tissue=tissue, heatmap=hm, features=fv)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run, pairs))
    return [run(pair) for pair in pairs]


def _tissue_from_file(bundle, path) -> TissueMask:
    grid = roi.read_mask(path)
    level = next((lv.level for lv in bundle.levels
                  if grid.shape == (lv.height, lv.width)), None)
    if level is None:
        raise ValueError(f"mask {path} matches no pyramid level of {bundle.id}")
    return TissueMask(slide_id=bundle.id, level=level, grid=grid)


def _annotation_cells(mask: np.ndarray, shape, cell_size: int) -> np.ndarray:
    """Project a level-0 boolean raster onto the heatmap cell grid (a cell
    is hit if any of its pixels are)."""
    hc, wc = shape
    padded = np.zeros((hc * cell_size, wc * cell_size), dtype=bool)
    padded[:mask.shape[0], :mask.shape[1]] = mask
    return padded.reshape(hc, cell_size, wc, cell_size).any(axis=(1, 3))


def run_pipeline(cohort_path, out_dir, model_path, scorer_factory, *,
                 roi_threshold: float = 0.8, t: float = 0.9,
                 overlap: str = "half",
                 fp_points=metrics_mod.DEFAULT_FP_POINTS,
                 workers: int = 1) -> dict:
    """Execute roi -> heatmap -> features -> forest -> staging -> eval over
    a cohort directory, resuming from existing artifacts.

    ``scorer_factory`` is called with the cohort's annotation rasters
    ({slide_id: bool array}) and must return a scorer; the pipeline closes
    it when scoring finishes. Returns the evaluation report (also written
    to report.json). Raises StageError on failure; later artifacts are not
    written once a stage fails.
    """
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    (out / "heatmaps").mkdir(exist_ok=True)

    try:
        cohort = load_cohort(cohort_path)
        annotations = load_annotations(cohort)
    except Exception as exc:
        raise StageError("cohort", exc) from exc
    slides = list(iter_slides(cohort))

    tissues = {}
    try:
        for _, info in slides:
            mask_path = out / "masks" / f"{info.slide_id}.tmsk"
            bundle = open_bundle(cohort, info)
            if mask_path.exists():
                tissues[info.slide_id] = _tissue_from_file(bundle, mask_path)
            else:
                mask = roi.tissue_mask(bundle, roi_threshold)
                roi.write_mask(mask_path, mask)
                tissues[info.slide_id] = mask
    except Exception as exc:
        raise StageError("roi", exc) from exc

    heatmaps = {}
    try:
        todo = [(p, s) for p, s in slides
                if not (out / "heatmaps" / f"{s.slide_id}.hmap").exists()]
        if todo:
            scorer = scorer_factory(annotations)
            try:
                def one(pair):
                    _, info = pair
                    bundle = open_bundle(cohort, info)
                    return info.slide_id, hm_mod.stitch_heatmap(
                        bundle, tissues[info.slide_id], scorer,
                        overlap=overlap)
                if workers > 1:
                    with ThreadPoolExecutor(max_workers=workers) as pool:
                        results = list(pool.map(one, todo))
                else:
                    results = [one(pair) for pair in todo]
            finally:
                scorer.close()
            for sid, hm in results:
                hm_mod.write_heatmap(out / "heatmaps" / f"{sid}.hmap", hm)
        for _, info in slides:
            heatmaps[info.slide_id] = hm_mod.read_heatmap(
                out / "heatmaps" / f"{info.slide_id}.hmap", info.slide_id)
    except Exception as exc:
        raise StageError("heatmap", exc) from exc

    features_path = out / "features.csv"
    try:
        if features_path.exists():
            features = hm_mod.read_features_csv(features_path)
        else:
            features = []
            for _, info in slides:
                bundle = open_bundle(cohort, info)
                cells = hm_mod.tissue_cells(tissues[info.slide_id],
                                            bundle.width, bundle.height)
                fv = hm_mod.extract_features(heatmaps[info.slide_id],
                                             cells, t=t)
                features.append((info.slide_id, fv))
            hm_mod.write_features_csv(features_path, features)
    except Exception as exc:
        raise StageError("features", exc) from exc

    try:
        if not model_path or not Path(model_path).exists():
            raise FileNotFoundError(f"model file {model_path!r} not found")
        model = forest_mod.load_model(model_path)
        fv_by_slide = dict(features)
        predicted = {info.slide_id:
                     forest_mod.predict(model, fv_by_slide[info.slide_id])[0]
                     for _, info in slides}
        pred_rows = [(p.patient_id, s.slide_id, predicted[s.slide_id])
                     for p, s in slides]
        staging_mod.write_slide_labels(out / "predictions.csv", pred_rows)
    except Exception as exc:
        raise StageError("forest", exc) from exc

    try:
        records = staging_mod.group_patients(pred_rows)
        stages = staging_mod.stage_all(records)
        staging_mod.write_stages(out / "stages.csv", stages)
    except Exception as exc:
        raise StageError("staging", exc) from exc

    try:
        ref_pairs = [(s.node_class, predicted[s.slide_id]) for _, s in slides]
        counts, percents = metrics_mod.confusion_matrix(ref_pairs)
        accuracy = sum(int(r) == int(p) for r, p in ref_pairs) / len(ref_pairs)
        kappa_pairs = [(p.stage, stages[p.patient_id])
                       for p in cohort.patients]
        kappa = metrics_mod.quadratic_weighted_kappa(kappa_pairs)

        scored = [metrics_mod.ScoredSlide(
                      s.slide_id,
                      metrics_mod.NORMAL if s.node_class is NodeClass.Negative
                      else metrics_mod.TUMOR,
                      float(fv_by_slide[s.slide_id].f7))
                  for _, s in slides]
        auc_value = (metrics_mod.auc(scored)
                     if len({sl.label for sl in scored}) == 2 else None)

        detections = []
        gt_regions = []
        normal_slides = 0
        for _, s in slides:
            hm = heatmaps[s.slide_id]
            detections.extend(metrics_mod.detections_from_heatmap(hm, t))
            annot = annotations[s.slide_id]
            if annot.any():
                cell_mask = _annotation_cells(annot, hm.grid.shape,
                                              hm.cell_size)
                labeled, n = ndimage.label(cell_mask, structure=np.ones((3, 3)))
                for i in range(1, n + 1):
                    cells = frozenset(
                        map(tuple, np.argwhere(labeled == i).tolist()))
                    gt_regions.append(
                        metrics_mod.GroundTruthRegion(s.slide_id, cells))
            else:
                normal_slides += 1
        froc_report = None
        if gt_regions:
            curve, froc_score = metrics_mod.froc(
                detections, gt_regions, normal_slides, fp_points=fp_points)
            froc_report = {"value": froc_score,
                           "curve": [[th, f, sv] for th, f, sv in curve]}

        report = {
            "slides": len(slides),
            "patients": len(cohort.patients),
            "slide_accuracy": accuracy,
            "confusion_counts": counts.tolist(),
            "confusion_percents": percents.tolist(),
            "patient_kappa": kappa,
            "auc": auc_value,
            "froc": froc_report,
        }
        (out / "report.json").write_text(
            json.dumps(report, indent=2, sort_keys=True) + "\n")
    except Exception as exc:
        raise StageError("eval", exc) from exc
    return report
