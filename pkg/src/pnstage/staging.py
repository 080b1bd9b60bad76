"""Lymph-node class vocabulary and patient-level pN-stage aggregation.

The stage of a patient is determined by the mix of node classes across
their five slides. The decision table ships as data
(``staging_rules.json``) — an ordered first-match rule list over the
class counts — so the clinical thresholds can be amended without code
changes. A "positive" node is one classified Micro or Macro; ITC does
not count toward the positive-node total.
"""

from __future__ import annotations

import csv
import enum
import json
from dataclasses import dataclass
from importlib import resources

RULES_RESOURCE = "staging_rules.json"
SLIDES_PER_PATIENT = 5


class WrongSlideCount(Exception):
    """Patient record does not carry exactly five slide labels."""


class NodeClass(enum.IntEnum):
    """Per-slide metastasis class, ordered by severity."""

    Negative = 0
    ITC = 1
    Micro = 2
    Macro = 3


class PNStage(enum.IntEnum):
    """Patient stage, ordered; ``label`` gives the reporting form."""

    pN0 = 0
    pN0i = 1
    pN1mi = 2
    pN1 = 3
    pN2 = 4

    @property
    def label(self) -> str:
        return "pN0(i+)" if self is PNStage.pN0i else self.name


_STAGE_BY_LABEL = {s.label: s for s in PNStage}


def parse_stage(label: str) -> PNStage:
    try:
        return _STAGE_BY_LABEL[label]
    except KeyError:
        raise ValueError(f"unknown pN stage {label!r}") from None


def parse_node_class(name: str) -> NodeClass:
    try:
        return NodeClass[name]
    except KeyError:
        raise ValueError(f"unknown node class {name!r}") from None


@dataclass(frozen=True)
class PatientRecord:
    patient_id: str
    slides: tuple  # exactly 5 NodeClass values

    def __post_init__(self):
        if len(self.slides) != SLIDES_PER_PATIENT:
            raise WrongSlideCount(
                f"patient {self.patient_id!r} has {len(self.slides)} slides, "
                f"need {SLIDES_PER_PATIENT}")


def load_rules(path=None) -> dict:
    """Load the staging decision table (packaged default or a file)."""
    if path is None:
        text = resources.files(__package__).joinpath(RULES_RESOURCE).read_text()
    else:
        with open(path) as f:
            text = f.read()
    rules = json.loads(text)
    for key in ("classes", "stages", "rules"):
        if key not in rules:
            raise ValueError(f"staging rules missing {key!r}")
    return rules


_DEFAULT_RULES = None


def _default_rules() -> dict:
    global _DEFAULT_RULES
    if _DEFAULT_RULES is None:
        _DEFAULT_RULES = load_rules()
    return _DEFAULT_RULES


def _rule_matches(rule: dict, counts: dict) -> bool:
    positive = counts[NodeClass.Micro] + counts[NodeClass.Macro]
    for key, bound in rule.items():
        if key == "stage":
            continue
        if key == "min_itc":
            ok = counts[NodeClass.ITC] >= bound
        elif key == "min_micro":
            ok = counts[NodeClass.Micro] >= bound
        elif key == "min_macro":
            ok = counts[NodeClass.Macro] >= bound
        elif key == "min_positive":
            ok = positive >= bound
        elif key == "max_positive":
            ok = positive <= bound
        else:
            raise ValueError(f"unknown staging rule condition {key!r}")
        if not ok:
            return False
    return True


def stage_patient(rec: PatientRecord, rules: dict | None = None) -> PNStage:
    """Stage one patient by first-match over the rule table."""
    table = rules if rules is not None else _default_rules()
    counts = {c: 0 for c in NodeClass}
    for s in rec.slides:
        counts[NodeClass(s)] += 1
    for rule in table["rules"]:
        if _rule_matches(rule, counts):
            return parse_stage(rule["stage"])
    raise ValueError("staging rule table is not total")  # pragma: no cover


def stage_all(records: list, rules: dict | None = None) -> dict:
    """Stage every PatientRecord; patient_id -> PNStage."""
    return {rec.patient_id: stage_patient(rec, rules) for rec in records}


def read_slide_labels(path) -> list:
    """CSV rows of ``patient_id, slide_id, node_class`` (with header)."""
    out = []
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if [h.strip() for h in header] != ["patient_id", "slide_id", "node_class"]:
            raise ValueError(f"unexpected slide-label header {header}")
        for patient_id, slide_id, name in reader:
            out.append((patient_id, slide_id, parse_node_class(name)))
    return out


def write_slide_labels(path, rows: list) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["patient_id", "slide_id", "node_class"])
        for patient_id, slide_id, cls in rows:
            writer.writerow([patient_id, slide_id, NodeClass(cls).name])


def group_patients(rows: list) -> list:
    """Fold slide-label rows into PatientRecords, in first-seen order."""
    by_patient: dict = {}
    for patient_id, _slide_id, cls in rows:
        by_patient.setdefault(patient_id, []).append(NodeClass(cls))
    return [PatientRecord(pid, tuple(slides))
            for pid, slides in by_patient.items()]


def write_stages(path, stages: dict) -> None:
    """CSV rows of ``patient_id, stage`` in patient-id order."""
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["patient_id", "stage"])
        for patient_id in sorted(stages):
            writer.writerow([patient_id, PNStage(stages[patient_id]).label])


def read_stages(path) -> dict:
    out = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if [h.strip() for h in header] != ["patient_id", "stage"]:
            raise ValueError(f"unexpected stage header {header}")
        for patient_id, label in reader:
            out[patient_id] = parse_stage(label)
    return out
