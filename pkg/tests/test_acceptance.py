"""Acceptance gate: one test per release criterion.

Each test prints a single ``CRITERION <name>: PASS`` line (visible with
``pytest -s``; the ``-v`` test status carries the same verdict) and pins
the tolerances it enforces. These tests treat the package as a black box
wherever possible and verify against independent in-file references.
"""

import itertools
import json
import time
from contextlib import contextmanager
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from pnstage.cohort import iter_slides, load_annotations, synth_cohort
from pnstage.forest import (
    ForestParams,
    cross_validate,
    gini,
    load_model,
    predict,
    save_model,
    train_forest,
)
from pnstage.heatmap import (
    Heatmap,
    extract_features,
    stitch_heatmap,
    tissue_cells,
)
from pnstage.metrics import (
    ScoredSlide,
    auc,
    confusion_matrix,
    quadratic_weighted_kappa,
)
from pnstage.patches import AugmentationParams, augment_color, augment_geometric
from pnstage.pipeline import cohort_features, run_pipeline
from pnstage.roi import TissueMask, tissue_mask
from pnstage.scoring import OracleScorer, PatchScore
from pnstage.slide_io import SyntheticSpec, synthesize_slide
from pnstage.staging import NodeClass, PatientRecord, parse_node_class, stage_patient

DATA = Path(__file__).parent / "data"


@contextmanager
def criterion(name, detail=""):
    try:
        yield
    except BaseException:
        print(f"CRITERION {name}: FAIL {detail}")
        raise
    print(f"CRITERION {name}: PASS {detail}")


# --------------------------------------------------------------- references

def ref_auc(scores, labels):
    pos = [Fraction(s) for s, l in zip(scores, labels) if l == "tumor"]
    neg = [Fraction(s) for s, l in zip(scores, labels) if l == "normal"]
    wins = sum((p > n) + Fraction(p == n, 2) for p in pos for n in neg)
    return float(Fraction(wins) / (len(pos) * len(neg)))


def ref_kappa(pairs, n=5):
    o = [[0] * n for _ in range(n)]
    for r, p in pairs:
        o[r][p] += 1
    rows = [sum(row) for row in o]
    cols = [sum(o[i][j] for i in range(n)) for j in range(n)]
    num = den = 0.0
    for i in range(n):
        for j in range(n):
            w = (i - j) ** 2 / (n - 1) ** 2
            num += w * o[i][j]
            den += w * rows[i] * cols[j] / len(pairs)
    if den == 0.0:
        return 1.0 if num == 0.0 else 0.0
    return 1.0 - num / den


def ref_confusion(pairs, n=4):
    counts = [[0] * n for _ in range(n)]
    for r, p in pairs:
        counts[r][p] += 1
    return counts


def test_metric_oracles_match_brute_force():
    rng = np.random.default_rng(20260815)
    start = time.perf_counter()
    with criterion("metric-oracles", "1000 instances each, |delta| <= 1e-12"):
        for _ in range(1000):
            n = int(rng.integers(2, 30))
            scores = rng.choice([0.0, 0.1, 0.25, 0.5, 0.5, 0.9], size=n)
            labels = rng.choice(["tumor", "normal"], size=n).tolist()
            labels[0], labels[1] = "tumor", "normal"  # both classes present
            slides = [ScoredSlide(f"s{i}", l, float(s))
                      for i, (s, l) in enumerate(zip(scores, labels))]
            assert abs(auc(slides) - ref_auc(scores, labels)) <= 1e-12

        for _ in range(1000):
            n = int(rng.integers(1, 40))
            pairs = [(int(a), int(b))
                     for a, b in rng.integers(0, 5, size=(n, 2))]
            got = quadratic_weighted_kappa(pairs)
            assert abs(got - ref_kappa(pairs)) <= 1e-12

        for _ in range(1000):
            n = int(rng.integers(1, 40))
            pairs = [(int(a), int(b))
                     for a, b in rng.integers(0, 4, size=(n, 2))]
            counts, _ = confusion_matrix(pairs)
            assert counts.tolist() == ref_confusion(pairs)

        elapsed = time.perf_counter() - start
        assert elapsed < 10.0, f"metric oracles took {elapsed:.1f}s"


def test_staging_exhaustive_against_frozen_oracle():
    table = json.loads((DATA / "staging_table.json").read_text())
    start = time.perf_counter()
    with criterion("staging-exhaustive",
                   "1024 combinations exact + monotone + permutation"):
        assert len(table) == 4 ** 5
        stage_of = {}
        for entry in table:
            combo = tuple(int(parse_node_class(n)) for n in entry["slides"])
            got = stage_patient(
                PatientRecord("p", tuple(NodeClass(c) for c in combo)))
            assert got.label == entry["stage"]
            stage_of[combo] = int(got)

        for combo in itertools.product(range(4), repeat=5):
            # permutation invariance: any ordering stages like its sorted form
            assert stage_of[combo] == stage_of[tuple(sorted(combo))]
            # monotonicity: upgrading one slide never lowers the stage
            for i in range(5):
                for up in range(combo[i] + 1, 4):
                    worse = list(combo)
                    worse[i] = up
                    assert stage_of[tuple(worse)] >= stage_of[combo]

        elapsed = time.perf_counter() - start
        assert elapsed < 1.0, f"staging checks took {elapsed:.2f}s"


# ------------------------------------------------------------ overlap tile

class _ConstantOne:
    needs_pixels = False

    def score_batch(self, items):
        return [PatchScore(i.slide_id, i.x, i.y, 1.0) for i in items]

    def close(self):
        pass


class _FourPatchScorer:
    """Hand fixture: the four 256-px patches covering cell (1, 1) of a
    512x512 slide score 0.5, 0.5, 0.75, 0.75; their mean must be 0.625."""

    needs_pixels = False
    probs = {(0, 0): 0.5, (128, 0): 0.5, (0, 128): 0.75, (128, 128): 0.75}

    def score_batch(self, items):
        return [PatchScore(i.slide_id, i.x, i.y,
                           self.probs.get((i.x, i.y), 0.0)) for i in items]

    def close(self):
        pass


def _synthetic_bundle(tmp_path, seed, size=512, lesion_radius=None):
    lesions = []
    if lesion_radius:
        lesions = [((size // 2, size // 2), lesion_radius)]
    spec = SyntheticSpec(seed=seed, width_0=size, height_0=size,
                         tissue_blobs=2, tumor_lesions=lesions)
    bundle, annot = synthesize_slide(spec, tmp_path / f"slide_{seed}",
                                     slide_id=f"slide_{seed}", n_levels=6)
    return bundle, annot


def test_overlap_tile_correctness(tmp_path):
    with criterion("overlap-tile",
                   "constant exact; half >= none on 20 slides; 4-patch mean"):
        bundle, _ = _synthetic_bundle(tmp_path, seed=0)
        tissue = tissue_mask(bundle)
        hm = stitch_heatmap(bundle, tissue, _ConstantOne())
        cells = tissue_cells(tissue, bundle.width, bundle.height)
        assert np.all(hm.grid[cells] == np.float32(1.0))
        assert np.all(hm.grid[~cells] == np.float32(0.0))

        for seed in range(1, 21):
            bundle, annot = _synthetic_bundle(tmp_path, seed=seed,
                                              lesion_radius=90 + seed)
            tissue = tissue_mask(bundle)
            scorer = OracleScorer({bundle.id: annot.grid}, sigma=0.0)
            half = stitch_heatmap(bundle, tissue, scorer, overlap="half")
            none = stitch_heatmap(bundle, tissue, scorer, overlap="none")
            half_nz = half.grid > 0
            none_nz = none.grid > 0
            assert half_nz.sum() >= none_nz.sum()
            assert np.all(half_nz[none_nz])  # strictly a superset

        bundle, _ = _synthetic_bundle(tmp_path, seed=99)
        full = TissueMask(slide_id=bundle.id, level=5,
                          grid=np.ones((16, 16), dtype=bool))
        hm = stitch_heatmap(bundle, full, _FourPatchScorer())
        assert hm.grid[1, 1] == np.float32(0.625)


def test_feature_fixture_exact():
    doc = json.loads((DATA / "feature_fixture.json").read_text())
    with criterion("feature-fixture", "8x8 toy heatmap, exact 11-vector"):
        hm = Heatmap("fixture",
                     np.array(doc["heatmap"], dtype=np.float32))
        cells = np.array(doc["tissue"], dtype=bool)
        fv = extract_features(hm, cells, t=doc["threshold"])
        for name, expected in doc["expected"].items():
            assert getattr(fv, name) == expected, name


# ------------------------------------------------------------- end to end

MIX = {"Negative": 0.4, "ITC": 0.2, "Micro": 0.2, "Macro": 0.2}


def test_end_to_end_cohort_cv(tmp_path):
    start = time.perf_counter()
    with criterion("end-to-end-cv",
                   "40 patients, sigma=0.05, accuracy >= 0.90, "
                   "kappa >= 0.85, <= 600 s"):
        cohort = synth_cohort(tmp_path / "cohort", 40, MIX, seed=17)
        scorer = OracleScorer(load_annotations(cohort), sigma=0.05, seed=17)
        results = cohort_features(cohort, scorer)

        samples = [(r.features, r.reference_class) for r in results]
        patients = [r.patient_id for r in results]
        cv = cross_validate(samples, patients, k=5,
                            params=ForestParams(n_trees=200), seed=17)
        assert cv.mean_accuracy >= 0.90, cv.mean_accuracy

        predicted, reference = {}, {}
        for r, pred in zip(results, cv.predictions):
            predicted.setdefault(r.patient_id, []).append(pred)
            reference.setdefault(r.patient_id, []).append(r.reference_class)
        pairs = []
        for pid in sorted(predicted):
            pairs.append((
                stage_patient(PatientRecord(pid, tuple(reference[pid]))),
                stage_patient(PatientRecord(pid, tuple(predicted[pid])))))
        kappa = quadratic_weighted_kappa(pairs)
        assert kappa >= 0.85, kappa

        elapsed = time.perf_counter() - start
        assert elapsed <= 600.0, f"end-to-end took {elapsed:.0f}s"


def test_determinism_of_pipeline_artifacts(tmp_path):
    with criterion("determinism",
                   "byte-identical heatmaps, model, report on rerun"):
        mix = {"Negative": 1, "ITC": 1, "Micro": 0, "Macro": 0}
        cohort = synth_cohort(tmp_path / "cohort", 2, mix, seed=5,
                              slide_size=512)

        def factory(annotations):
            return OracleScorer(annotations, sigma=0.05, seed=3)

        # features for training come from an identical first pass
        results = cohort_features(
            cohort, OracleScorer(load_annotations(cohort), sigma=0.05,
                                 seed=3))
        samples = [(r.features, r.reference_class) for r in results]
        models = []
        for name in ("m1.json", "m2.json"):
            path = tmp_path / name
            save_model(path, train_forest(samples,
                                          ForestParams(n_trees=50), seed=9))
            models.append(path.read_bytes())
        assert models[0] == models[1]

        outs = []
        for name in ("run1", "run2"):
            out = tmp_path / name
            run_pipeline(cohort.path, out, tmp_path / "m1.json", factory)
            outs.append(out)
        a, b = outs
        hmaps = sorted(p.name for p in (a / "heatmaps").glob("*.hmap"))
        assert hmaps  # ten slides stitched
        for name in hmaps:
            assert (a / "heatmaps" / name).read_bytes() \
                == (b / "heatmaps" / name).read_bytes()
        assert (a / "report.json").read_bytes() \
            == (b / "report.json").read_bytes()


def test_forest_sanity(tmp_path):
    with criterion("forest-sanity",
                   "separable CV accuracy == 1.0; pure gini == 0; "
                   "round-trip on 1000 vectors"):
        rng = np.random.default_rng(4)
        samples, patients = [], []
        for i in range(20):
            cls = NodeClass(i % 4)
            center = np.zeros(11)
            center[0] = 10.0 * int(cls)
            for _ in range(5):
                samples.append((center + rng.normal(0, 0.1, 11), cls))
                patients.append(f"p{i:02d}")
        cv = cross_validate(samples, patients, k=5,
                            params=ForestParams(n_trees=50), seed=1)
        assert cv.mean_accuracy == 1.0

        assert gini(np.array([7.0, 0.0, 0.0, 0.0])) == 0.0
        assert gini(np.array([0.0, 0.0, 3.5, 0.0])) == 0.0

        model = train_forest(samples, ForestParams(n_trees=25), seed=2)
        path = tmp_path / "model.json"
        save_model(path, model)
        loaded = load_model(path)
        probe = rng.uniform(-5, 35, size=(1000, 11))
        for x in probe:
            c1, p1 = predict(model, x)
            c2, p2 = predict(loaded, x)
            assert c1 == c2
            np.testing.assert_array_equal(p1, p2)


def test_augmentation_laws():
    rng = np.random.default_rng(8)
    with criterion("augmentation-laws",
                   "identity no-op; double flip; 180 deg; gray hue/sat; "
                   "uniform contrast"):
        identity = AugmentationParams()
        ctx = rng.integers(0, 256, size=(362, 362, 3), dtype=np.uint8)
        assert np.array_equal(augment_geometric(ctx, identity),
                              ctx[53:309, 53:309])

        patch = rng.integers(0, 256, size=(256, 256, 3), dtype=np.uint8)
        assert np.array_equal(augment_color(patch, identity), patch)

        flip = AugmentationParams(flip=True)
        assert np.array_equal(augment_geometric(ctx[:, ::-1], flip),
                              augment_geometric(ctx, identity))

        rot180 = AugmentationParams(angle=180.0)
        assert np.array_equal(augment_geometric(ctx, rot180),
                              ctx[308:52:-1, 308:52:-1])

        gray = np.repeat(rng.integers(0, 256, size=(256, 256, 1),
                                      dtype=np.uint8), 3, axis=2)
        tinted = AugmentationParams(hue_delta=0.04, sat_factor=0.8)
        assert np.array_equal(augment_color(gray, tinted), gray)

        uniform = np.full((256, 256, 3), 97, dtype=np.uint8)
        stretched = AugmentationParams(contrast_factor=1.75)
        assert np.array_equal(augment_color(uniform, stretched), uniform)
