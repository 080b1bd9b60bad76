"""Whole-slide pN-stage prediction pipeline.

Slide bundles -> tissue masks -> patch-scored tumor heatmaps -> region
features -> random-forest node classes -> rule-based patient pN-stages,
plus the matching evaluation metrics. Patch scorers are pluggable; an
external process can serve scores over a binary stdio protocol (see
``pnstage.scoring``).
"""

from .slide_io import (
    AnnotationMask,
    SlideBundle,
    SyntheticSpec,
    read_bundle,
    synthesize_slide,
    write_bundle,
)
from .roi import TissueMask, read_mask, tissue_mask, to_gray, write_mask
from .patches import (
    AugmentationParams,
    PatchRef,
    augment_color,
    augment_geometric,
    balanced_sample,
    enumerate_patches,
    split_patients,
)
from .scoring import (
    ConstantScorer,
    ExternalScorer,
    OracleScorer,
    PatchScore,
    ScoreItem,
    score_batch,
    spawn_external,
)
from .heatmap import (
    Heatmap,
    Region,
    RegionFeatureVector,
    average_heatmaps,
    extract_features,
    major_axis,
    read_heatmap,
    stitch_heatmap,
    threshold_regions,
    write_heatmap,
)
from .forest import (
    ForestModel,
    ForestParams,
    cross_validate,
    load_model,
    predict,
    save_model,
    train_forest,
)
from .staging import NodeClass, PatientRecord, PNStage, stage_all, stage_patient
from .metrics import (
    GroundTruthRegion,
    LesionDetection,
    ScoredSlide,
    auc,
    confusion_matrix,
    froc,
    quadratic_weighted_kappa,
)
from .cohort import CohortInfo, load_cohort, synth_cohort
from .pipeline import SlideResult, StageError, cohort_features, run_pipeline

__version__ = "0.1.0"

__all__ = [
    "AnnotationMask", "SlideBundle", "SyntheticSpec", "read_bundle",
    "synthesize_slide", "write_bundle",
    "TissueMask", "read_mask", "tissue_mask", "to_gray", "write_mask",
    "AugmentationParams", "PatchRef", "augment_color", "augment_geometric",
    "balanced_sample", "enumerate_patches", "split_patients",
    "ConstantScorer", "ExternalScorer", "OracleScorer", "PatchScore",
    "ScoreItem", "score_batch", "spawn_external",
    "Heatmap", "Region", "RegionFeatureVector", "average_heatmaps",
    "extract_features", "major_axis", "read_heatmap", "stitch_heatmap",
    "threshold_regions", "write_heatmap",
    "ForestModel", "ForestParams", "cross_validate", "load_model", "predict",
    "save_model", "train_forest",
    "NodeClass", "PatientRecord", "PNStage", "stage_all", "stage_patient",
    "GroundTruthRegion", "LesionDetection", "ScoredSlide", "auc",
    "confusion_matrix", "froc", "quadratic_weighted_kappa",
    "CohortInfo", "load_cohort", "synth_cohort",
    "SlideResult", "StageError", "cohort_features", "run_pipeline",
]
