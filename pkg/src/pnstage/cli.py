"""Command-line interface.

Every pipeline stage is a subcommand working on files, so stages are
resumable and independently testable; ``run`` chains them over a cohort
directory driven by a TOML config. Failures exit with a stage-specific
code (see EXIT_*), usage/config problems with 2.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import cohort as cohort_mod
from . import forest as forest_mod
from . import heatmap as hm_mod
from . import metrics as metrics_mod
from . import patches as patches_mod
from . import pipeline as pipeline_mod
from . import roi as roi_mod
from . import scoring as scoring_mod
from . import staging as staging_mod
from .slide_io import read_bundle

EXIT_USAGE = 2
EXIT_ROI = 10
EXIT_PATCHES = 11
EXIT_HEATMAP = 12
EXIT_FEATURES = 13
EXIT_FOREST = 14
EXIT_STAGING = 15
EXIT_EVAL = 16
EXIT_COHORT = 17

WORKERS_ENV = "PNSTAGE_WORKERS"

CONFIG_DEFAULTS = {
    "paths": {},
    "roi": {"threshold": 0.8},
    "patch": {"size": 256, "stride": 128},
    "heatmap": {"cell": 128, "overlap": "half"},
    "postproc": {"t": 0.9},
    "scorer": {"kind": "oracle", "sigma": 0.0, "seed": 0},
    "forest": {"n_trees": 500, "min_samples_leaf": 1, "features_per_split": 3},
    "froc": {"points": [0.25, 0.5, 1.0, 2.0, 4.0, 8.0]},
    "seeds": {"pipeline": 0},
    "run": {"workers": 1},
}


class StageFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _fail(code, exc_or_msg):
    raise StageFailure(code, str(exc_or_msg))


def load_config(path=None, overrides=None) -> dict:
    """Defaults, overlaid by the TOML file, overlaid by dotted overrides
    (e.g. ``postproc.t=0.8``)."""
    cfg = json.loads(json.dumps(CONFIG_DEFAULTS))  # deep copy
    if path is not None:
        with open(path, "rb") as f:
            loaded = tomllib.load(f)
        for section, values in loaded.items():
            cfg.setdefault(section, {}).update(values)
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ValueError(f"override {item!r} must look like section.key=value")
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        cfg.setdefault(section, {})[key] = parsed
    return cfg


def _workers(cfg: dict) -> int:
    env = os.environ.get(WORKERS_ENV)
    if env is not None:
        return max(1, int(env))
    return max(1, int(cfg["run"]["workers"]))


def parse_scorer_arg(text: str, annotations: dict | None = None):
    """Build a scorer from ``constant:P`` / ``oracle[:SIGMA[:SEED]]`` /
    ``external:CMD``."""
    kind, _, rest = text.partition(":")
    if kind == "constant":
        return scoring_mod.ConstantScorer(float(rest))
    if kind == "oracle":
        sigma, seed = 0.0, 0
        if rest:
            parts = rest.split(":")
            sigma = float(parts[0])
            if len(parts) > 1:
                seed = int(parts[1])
        return scoring_mod.OracleScorer(annotations or {}, sigma=sigma, seed=seed)
    if kind == "external":
        if not rest:
            raise ValueError("external scorer needs a command")
        return scoring_mod.spawn_external(rest)
    raise ValueError(f"unknown scorer {text!r}")


def _scorer_from_config(cfg: dict, annotations: dict | None):
    sc = cfg["scorer"]
    kind = sc.get("kind", "oracle")
    if kind == "constant":
        return scoring_mod.ConstantScorer(float(sc["value"]))
    if kind == "oracle":
        return scoring_mod.OracleScorer(annotations or {},
                                        sigma=float(sc.get("sigma", 0.0)),
                                        seed=int(sc.get("seed", 0)))
    if kind == "external":
        return scoring_mod.spawn_external(sc["cmd"])
    raise ValueError(f"unknown scorer kind {kind!r}")


def _tissue_from_file(bundle, path) -> roi_mod.TissueMask:
    grid = roi_mod.read_mask(path)
    level = next((lv.level for lv in bundle.levels
                  if grid.shape == (lv.height, lv.width)), None)
    if level is None:
        raise ValueError(f"mask {path} matches no pyramid level of {bundle.id}")
    return roi_mod.TissueMask(slide_id=bundle.id, level=level, grid=grid)


# ---------------------------------------------------------------- commands

def cmd_roi(args):
    try:
        bundle = read_bundle(args.bundle)
        mask = roi_mod.tissue_mask(bundle, args.threshold)
        roi_mod.write_mask(args.out, mask)
    except Exception as exc:
        _fail(EXIT_ROI, exc)


def cmd_patches(args):
    try:
        bundle = read_bundle(args.bundle)
        tissue = _tissue_from_file(bundle, args.mask)
        annot = None
        if args.annot:
            from .slide_io import AnnotationMask
            annot = AnnotationMask(slide_id=bundle.id, level=0,
                                   grid=roi_mod.read_mask(args.annot))
        refs = patches_mod.enumerate_patches(bundle, tissue, annot)
        patches_mod.write_patch_refs(args.out, refs)
    except Exception as exc:
        _fail(EXIT_PATCHES, exc)


def cmd_sample(args):
    try:
        refs = patches_mod.read_patch_refs(args.patches)
        by_slide: dict = {}
        for ref in refs:
            by_slide.setdefault(ref.slide_id, []).append(ref)
        sampled = patches_mod.balanced_sample(
            by_slide, args.n, args.seed,
            normals_from_tumor_slides=not args.normals_from_normal_slides_only)
        patches_mod.write_patch_refs(args.out, sampled)
    except Exception as exc:
        _fail(EXIT_PATCHES, exc)


def cmd_heatmap(args):
    try:
        if args.ensemble:
            hms = [hm_mod.read_heatmap(p) for p in args.ensemble]
            hm = hm_mod.average_heatmaps(hms)
        else:
            bundle = read_bundle(args.bundle)
            tissue = _tissue_from_file(bundle, args.mask)
            annotations = {}
            if args.annot:
                annotations[bundle.id] = roi_mod.read_mask(args.annot)
            scorer = parse_scorer_arg(args.scorer, annotations)
            try:
                hm = hm_mod.stitch_heatmap(bundle, tissue, scorer,
                                           overlap=args.overlap)
            finally:
                scorer.close()
        hm_mod.write_heatmap(args.out, hm)
        if args.png:
            hm_mod.write_heatmap_png(args.png, hm)
    except Exception as exc:
        _fail(EXIT_HEATMAP, exc)


def cmd_features(args):
    try:
        bundle = read_bundle(args.bundle)
        hm = hm_mod.read_heatmap(args.heatmap, slide_id=bundle.id)
        tissue = _tissue_from_file(bundle, args.mask)
        cells = hm_mod.tissue_cells(tissue, bundle.width, bundle.height,
                                    hm.cell_size)
        fv = hm_mod.extract_features(hm, cells, t=args.t)
        hm_mod.write_features_csv(args.out, [(bundle.id, fv)])
    except Exception as exc:
        _fail(EXIT_FEATURES, exc)


def _join_features_labels(features_path, labels_path):
    features = hm_mod.read_features_csv(features_path)
    rows = staging_mod.read_slide_labels(labels_path)
    cls_by_slide = {sid: cls for _, sid, cls in rows}
    patient_by_slide = {sid: pid for pid, sid, _ in rows}
    samples, patients, slide_ids = [], [], []
    for sid, fv in features:
        if sid not in cls_by_slide:
            raise ValueError(f"slide {sid!r} has features but no label")
        samples.append((fv, cls_by_slide[sid]))
        patients.append(patient_by_slide[sid])
        slide_ids.append(sid)
    return samples, patients, slide_ids


def cmd_train_rf(args):
    try:
        samples, _, _ = _join_features_labels(args.features, args.labels)
        params = forest_mod.ForestParams(
            n_trees=args.n_trees, max_depth=args.max_depth,
            min_samples_leaf=args.min_samples_leaf,
            features_per_split=args.features_per_split,
            class_weight="balanced" if args.balanced else None)
        model = forest_mod.train_forest(samples, params, seed=args.seed)
        forest_mod.save_model(args.out, model)
    except Exception as exc:
        _fail(EXIT_FOREST, exc)


def cmd_cv(args):
    try:
        samples, patients, slide_ids = _join_features_labels(
            args.features, args.labels)
        params = forest_mod.ForestParams(
            n_trees=args.n_trees, max_depth=args.max_depth,
            min_samples_leaf=args.min_samples_leaf,
            features_per_split=args.features_per_split,
            class_weight="balanced" if args.balanced else None)
        result = forest_mod.cross_validate(samples, patients, k=args.k,
                                           params=params, seed=args.seed)
        by_patient: dict = {}
        ref_by_patient: dict = {}
        for pid, (fv, cls), pred in zip(patients, samples, result.predictions):
            by_patient.setdefault(pid, []).append(pred)
            ref_by_patient.setdefault(pid, []).append(staging_mod.NodeClass(cls))
        pairs = []
        for pid in sorted(by_patient):
            ref = staging_mod.stage_patient(
                staging_mod.PatientRecord(pid, tuple(ref_by_patient[pid])))
            pred = staging_mod.stage_patient(
                staging_mod.PatientRecord(pid, tuple(by_patient[pid])))
            pairs.append((ref, pred))
        report = {
            "fold_accuracies": result.fold_accuracies,
            "mean_accuracy": result.mean_accuracy,
            "patient_kappa": metrics_mod.quadratic_weighted_kappa(pairs),
            "folds": result.folds,
        }
        _emit_report(report, args.out)
    except Exception as exc:
        _fail(EXIT_FOREST, exc)


def cmd_predict_rf(args):
    try:
        model = forest_mod.load_model(args.model)
        features = hm_mod.read_features_csv(args.features)
        preds = [(sid, forest_mod.predict(model, fv)[0]) for sid, fv in features]
        if args.patients:
            patient_by_slide = {}
            for pid, sid, _ in staging_mod.read_slide_labels(args.patients):
                patient_by_slide[sid] = pid
            rows = [(patient_by_slide[sid], sid, cls) for sid, cls in preds]
            staging_mod.write_slide_labels(args.out, rows)
        else:
            staging_mod.write_slide_labels(
                args.out, [("", sid, cls) for sid, cls in preds])
    except Exception as exc:
        _fail(EXIT_FOREST, exc)


def cmd_stage(args):
    try:
        rows = staging_mod.read_slide_labels(args.infile)
        records = staging_mod.group_patients(rows)
        rules = staging_mod.load_rules(args.rules) if args.rules else None
        stages = staging_mod.stage_all(records, rules)
        staging_mod.write_stages(args.out, stages)
    except Exception as exc:
        _fail(EXIT_STAGING, exc)


def _read_scores_csv(path):
    import csv
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if [h.strip() for h in header] != ["slide_id", "label", "score"]:
            raise ValueError(f"unexpected scores header {header}")
        for sid, label, score in reader:
            out.append(metrics_mod.ScoredSlide(sid, label, float(score)))
    return out


def cmd_eval(args):
    try:
        if args.task == "auc":
            value = metrics_mod.auc(_read_scores_csv(args.scores))
            report = {"task": "auc", "value": value}
        elif args.task == "kappa":
            ref = staging_mod.read_stages(args.ref)
            pred = staging_mod.read_stages(args.pred)
            if set(ref) != set(pred):
                raise ValueError("reference and prediction patients differ")
            pairs = [(ref[p], pred[p]) for p in sorted(ref)]
            value = metrics_mod.quadratic_weighted_kappa(pairs)
            report = {"task": "kappa", "value": value}
        elif args.task == "confusion":
            ref = {sid: cls for _, sid, cls
                   in staging_mod.read_slide_labels(args.ref)}
            pred = {sid: cls for _, sid, cls
                    in staging_mod.read_slide_labels(args.pred)}
            if set(ref) != set(pred):
                raise ValueError("reference and prediction slides differ")
            pairs = [(ref[s], pred[s]) for s in sorted(ref)]
            counts, percents = metrics_mod.confusion_matrix(pairs)
            report = {"task": "confusion", "counts": counts.tolist(),
                      "percents": percents.tolist()}
        else:  # froc
            dets = [metrics_mod.LesionDetection(d["slide_id"],
                                                tuple(d["location"]),
                                                d["confidence"])
                    for d in json.loads(Path(args.detections).read_text())]
            gts = [metrics_mod.GroundTruthRegion(
                       g["slide_id"],
                       frozenset(tuple(c) for c in g["cells"]))
                   for g in json.loads(Path(args.ground_truth).read_text())]
            curve, score = metrics_mod.froc(dets, gts, args.normal_slides,
                                            fp_points=args.points)
            report = {"task": "froc", "value": score,
                      "curve": [[t, f, s] for t, f, s in curve]}
        _emit_report(report, args.out)
    except Exception as exc:
        _fail(EXIT_EVAL, exc)


def cmd_synth_cohort(args):
    try:
        mix = {}
        for part in args.mix.split(","):
            name, _, weight = part.partition("=")
            mix[name.strip()] = float(weight)
        cohort_mod.synth_cohort(args.out, args.patients, mix, args.seed,
                                slide_size=args.slide_size)
    except Exception as exc:
        _fail(EXIT_COHORT, exc)


def _emit_report(report: dict, out_path):
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)


_STAGE_EXITS = {
    "cohort": EXIT_COHORT,
    "roi": EXIT_ROI,
    "heatmap": EXIT_HEATMAP,
    "features": EXIT_FEATURES,
    "forest": EXIT_FOREST,
    "staging": EXIT_STAGING,
    "eval": EXIT_EVAL,
}


def cmd_run(args):
    cfg = load_config(args.config, args.set)
    paths = cfg["paths"]
    for required in ("cohort", "out"):
        if required not in paths:
            raise StageFailure(EXIT_USAGE, f"config paths.{required} missing")
    try:
        pipeline_mod.run_pipeline(
            paths["cohort"], paths["out"], paths.get("model"),
            lambda annotations: _scorer_from_config(cfg, annotations),
            roi_threshold=cfg["roi"]["threshold"],
            t=cfg["postproc"]["t"],
            overlap=cfg["heatmap"]["overlap"],
            fp_points=cfg["froc"]["points"],
            workers=_workers(cfg))
    except pipeline_mod.StageError as exc:
        _fail(_STAGE_EXITS[exc.stage], exc)


# ----------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pnstage",
        description="pN-stage prediction pipeline over slide bundles")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("roi", help="tissue mask from a slide bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_roi)

    p = sub.add_parser("patches", help="enumerate and label the patch grid")
    p.add_argument("--bundle", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--annot")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_patches)

    p = sub.add_parser("sample", help="balanced tumor/normal patch sample")
    p.add_argument("--patches", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--normals-from-normal-slides-only", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("heatmap", help="stitch (or ensemble) a heatmap")
    p.add_argument("--bundle")
    p.add_argument("--mask")
    p.add_argument("--annot")
    p.add_argument("--scorer", default="constant:0.5")
    p.add_argument("--overlap", choices=("half", "none"), default="half")
    p.add_argument("--ensemble", nargs="+")
    p.add_argument("--png")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_heatmap)

    p = sub.add_parser("features", help="11-feature vector from a heatmap")
    p.add_argument("--bundle", required=True)
    p.add_argument("--heatmap", required=True)
    p.add_argument("--mask", required=True)
    p.add_argument("--t", type=float, default=0.9)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_features)

    def forest_args(p):
        p.add_argument("--n-trees", type=int, default=500)
        p.add_argument("--max-depth", type=int, default=None)
        p.add_argument("--min-samples-leaf", type=int, default=1)
        p.add_argument("--features-per-split", type=int, default=3)
        p.add_argument("--balanced", action="store_true")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("train-rf", help="train the random forest")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    forest_args(p)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_rf)

    p = sub.add_parser("cv", help="patient-level cross-validation")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--k", type=int, default=5)
    forest_args(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_cv)

    p = sub.add_parser("predict-rf", help="predict node classes")
    p.add_argument("--model", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--patients",
                   help="slide-label CSV supplying patient ids for output")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict_rf)

    p = sub.add_parser("stage", help="pN-stage patients from slide labels")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--rules")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stage)

    p = sub.add_parser("eval", help="evaluation metrics")
    p.add_argument("--task", choices=("auc", "froc", "kappa", "confusion"),
                   required=True)
    p.add_argument("--scores")
    p.add_argument("--ref")
    p.add_argument("--pred")
    p.add_argument("--detections")
    p.add_argument("--ground-truth")
    p.add_argument("--normal-slides", type=int, default=0)
    p.add_argument("--points", type=float, nargs="+",
                   default=list(metrics_mod.DEFAULT_FP_POINTS))
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="full pipeline over a cohort")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[],
                   help="override config values: section.key=value")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("synth-cohort", help="generate a synthetic cohort")
    p.add_argument("--out", required=True)
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--mix", required=True,
                   help="e.g. Negative=0.4,ITC=0.2,Micro=0.2,Macro=0.2")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--slide-size", type=int,
                   default=cohort_mod.DEFAULT_SLIDE_SIZE)
    p.set_defaults(func=cmd_synth_cohort)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except StageFailure as exc:
        print(f"pnstage {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (ValueError, OSError) as exc:
        print(f"pnstage {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
