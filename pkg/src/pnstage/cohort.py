"""Synthetic patient cohorts: N patients x 5 slides with known classes.

Lesion geometry is chosen so the heatmap pipeline can recover the class
by construction. On the default 1280-px slides (10x10 heatmap cells), a
cell reaches probability ~1.0 only when the union of its four covering
patches (a 384-px square around the cell) lies inside the lesion, which
needs a disk radius of at least 192*sqrt(2) ~= 271.5 px. Radii are drawn
per class around that geometry:

  ITC    104-140 px  no cell reaches t=0.9; max patch fraction ~0.7
  Micro  272-320 px  1-5 super-threshold cells
  Macro  500-560 px  9+ super-threshold cells

Lesion centers snap to heatmap cell centers so the covering-patch union
is centered on a cell. Reference pN-stages follow from the drawn classes
via the staging rules.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import roi, staging
from .slide_io import SlideBundle, SyntheticSpec, read_bundle, synthesize_slide
from .staging import NodeClass, PatientRecord

COHORT_MANIFEST = "cohort.json"
ANNOTATION_FILE = "tumor_annotation.tmsk"
DEFAULT_SLIDE_SIZE = 1280
CELL = 128

RADIUS_RANGES = {
    NodeClass.ITC: (104.0, 140.0),
    NodeClass.Micro: (272.0, 320.0),
    NodeClass.Macro: (500.0, 560.0),
}


class BadMix(Exception):
    """class_mix must weight all four node classes, nonnegatively."""


@dataclass(frozen=True)
class SlideInfo:
    slide_id: str
    node_class: NodeClass
    path: str  # bundle directory, relative to the cohort root
    lesion: tuple | None  # ((cx, cy), radius) at level 0


@dataclass(frozen=True)
class PatientInfo:
    patient_id: str
    stage: staging.PNStage
    slides: tuple  # of SlideInfo


@dataclass
class CohortInfo:
    path: Path
    seed: int
    slide_size: int
    patients: list


def _normalize_mix(class_mix: dict) -> np.ndarray:
    probs = np.zeros(len(NodeClass))
    seen = set()
    for key, weight in class_mix.items():
        cls = key if isinstance(key, NodeClass) else staging.parse_node_class(key)
        if weight < 0:
            raise BadMix(f"negative weight for {cls.name}")
        probs[int(cls)] = weight
        seen.add(cls)
    if seen != set(NodeClass):
        missing = sorted(c.name for c in set(NodeClass) - seen)
        raise BadMix(f"class_mix missing {missing}")
    if probs.sum() <= 0:
        raise BadMix("class_mix weights sum to zero")
    return probs / probs.sum()


def _lesion_cells(slide_size: int, r_max: float) -> list:
    """Heatmap cell indices whose center keeps a disk of r_max in bounds.

    The disk must also clear the first heatmap row/column by a full cell:
    those cells have a single covering patch instead of four, so a disk
    pressed against the low edge scores them far above what the interior
    geometry (and the class cell-count ranges above) would predict.
    """
    cells = slide_size // CELL
    ok = [c for c in range(cells)
          if c * CELL + 64 - r_max >= CELL
          and c * CELL + 64 + r_max <= slide_size - 1]
    if not ok:
        raise ValueError(f"slide size {slide_size} too small for radius {r_max}")
    return ok


def synth_cohort(dest, n_patients: int, class_mix: dict, seed: int,
                 slide_size: int = DEFAULT_SLIDE_SIZE,
                 n_levels: int = 6) -> CohortInfo:
    """Generate a cohort on disk: bundles, level-0 tumor annotations, and
    a manifest with reference classes and pN-stages."""
    probs = _normalize_mix(class_mix)
    dest = Path(dest)
    dest.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0407]))

    patients = []
    for i in range(n_patients):
        pid = f"patient_{i:03d}"
        slides = []
        classes = []
        for j in range(5):
            cls = NodeClass(int(rng.choice(len(NodeClass), p=probs)))
            sid = f"{pid}_node_{j}"
            lesions = []
            lesion = None
            if cls is not NodeClass.Negative:
                lo, hi = RADIUS_RANGES[cls]
                radius = float(rng.uniform(lo, hi))
                cands = _lesion_cells(slide_size, hi)
                cx = int(rng.choice(cands)) * CELL + 64
                cy = int(rng.choice(cands)) * CELL + 64
                lesion = ((cx, cy), radius)
                lesions = [lesion]
            spec_seed = int(np.random.SeedSequence(
                [seed, i, j]).generate_state(1)[0])
            spec = SyntheticSpec(seed=spec_seed, width_0=slide_size,
                                 height_0=slide_size, tissue_blobs=2,
                                 tumor_lesions=lesions)
            slide_dir = dest / sid
            _, annot = synthesize_slide(spec, slide_dir, slide_id=sid,
                                        n_levels=n_levels)
            roi.write_mask(slide_dir / ANNOTATION_FILE, annot.grid)
            slides.append(SlideInfo(slide_id=sid, node_class=cls,
                                    path=sid, lesion=lesion))
            classes.append(cls)
        stage = staging.stage_patient(PatientRecord(pid, tuple(classes)))
        patients.append(PatientInfo(patient_id=pid, stage=stage,
                                    slides=tuple(slides)))

    manifest = {
        "seed": seed,
        "slide_size": slide_size,
        "patients": [
            {
                "id": p.patient_id,
                "stage": p.stage.label,
                "slides": [
                    {
                        "id": s.slide_id,
                        "class": s.node_class.name,
                        "path": s.path,
                        "lesion": None if s.lesion is None else
                            {"cx": s.lesion[0][0], "cy": s.lesion[0][1],
                             "radius": s.lesion[1]},
                    }
                    for s in p.slides
                ],
            }
            for p in patients
        ],
    }
    (dest / COHORT_MANIFEST).write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return CohortInfo(path=dest, seed=seed, slide_size=slide_size,
                      patients=patients)


def load_cohort(path) -> CohortInfo:
    path = Path(path)
    manifest = json.loads((path / COHORT_MANIFEST).read_text())
    patients = []
    for p in manifest["patients"]:
        slides = []
        for s in p["slides"]:
            lesion = None
            if s["lesion"] is not None:
                lesion = ((s["lesion"]["cx"], s["lesion"]["cy"]),
                          s["lesion"]["radius"])
            slides.append(SlideInfo(slide_id=s["id"],
                                    node_class=staging.parse_node_class(s["class"]),
                                    path=s["path"], lesion=lesion))
        patients.append(PatientInfo(patient_id=p["id"],
                                    stage=staging.parse_stage(p["stage"]),
                                    slides=tuple(slides)))
    return CohortInfo(path=path, seed=manifest["seed"],
                      slide_size=manifest["slide_size"], patients=patients)


def iter_slides(cohort: CohortInfo):
    """Yield (patient, slide_info) pairs in manifest order."""
    for p in cohort.patients:
        for s in p.slides:
            yield p, s


def open_bundle(cohort: CohortInfo, slide: SlideInfo) -> SlideBundle:
    return read_bundle(cohort.path / slide.path)


def load_annotations(cohort: CohortInfo) -> dict:
    """slide_id -> level-0 boolean tumor raster, for the oracle scorer."""
    masks = {}
    for _, s in iter_slides(cohort):
        masks[s.slide_id] = roi.read_mask(cohort.path / s.path / ANNOTATION_FILE)
    return masks
