"""The whole pipeline: synthetic patients in, pN stages and a report out.

Trains a forest on one seeded cohort, then lets the resumable pipeline
runner process a second, unseen cohort end to end - masks, heatmaps,
features, slide classification, patient staging, evaluation. Artifacts land
in ./demo_output/staging.

    python3 demos/cohort_to_stages.py
"""

import json
from pathlib import Path

from pnstage.cohort import load_annotations, load_cohort, synth_cohort
from pnstage.forest import ForestParams, save_model, train_forest
from pnstage.pipeline import cohort_features, run_pipeline
from pnstage.scoring import OracleScorer



OUT = Path("demo_output/staging")
OUT.mkdir(parents=True, exist_ok=True)
MIX = {"Negative": 0.4, "ITC": 0.2, "Micro": 0.2, "Macro": 0.2}

# Two disjoint cohorts: five slides (lymph nodes) per patient, node classes
# drawn from MIX, every tumor a disk whose radius matches its class.
train_dir, test_dir = OUT / "train_cohort", OUT / "test_cohort"
synth_cohort(train_dir, n_patients=8, class_mix=MIX, seed=1)
synth_cohort(test_dir, n_patients=4, class_mix=MIX, seed=2)

# Featurize the training cohort. The oracle scorer plays the role of a
# trained patch model: it answers with each patch's true tumor fraction
# plus gaussian noise, so the downstream stages face realistic-but-known
# inputs.
train = load_cohort(train_dir)
scorer = OracleScorer(load_annotations(train), sigma=0.05, seed=11)
results = cohort_features(train, scorer)
print(f"training features: {len(results)} slides, 11 numbers each")

# Slide-level classifier: a small bagged forest is plenty at this scale.
samples = [(r.features, r.reference_class) for r in results]
model = train_forest(samples, ForestParams(n_trees=200), seed=11)
save_model(OUT / "model.json", model)

# Now the unseen cohort, end to end. run_pipeline retraces the same per-
# slide stages against the saved model, stages each patient from their five
# slide classes, and evaluates everything against the cohort's references.
report = run_pipeline(
    test_dir, OUT / "run", OUT / "model.json",
    scorer_factory=lambda masks: OracleScorer(masks, sigma=0.05, seed=12))

print(f"slides {report['slides']}, patients {report['patients']}")
print(f"slide accuracy  {report['slide_accuracy']:.3f}")
print(f"patient kappa   {report['patient_kappa']:.3f}")
print(f"tumor-slide AUC {report['auc']:.3f}")
print("per-patient stages:")
stages = (OUT / "run" / "stages.csv").read_text().strip().splitlines()
for line in stages[1:]:
    print(f"  {line}")
print(f"full report: {OUT / 'run' / 'report.json'}")
assert json.loads((OUT / "run" / "report.json").read_text()) == report
