import itertools
import json
from pathlib import Path

import pytest

from pnstage.staging import (
    NodeClass,
    PatientRecord,
    PNStage,
    WrongSlideCount,
    group_patients,
    load_rules,
    parse_node_class,
    parse_stage,
    read_slide_labels,
    read_stages,
    stage_all,
    stage_patient,
    write_slide_labels,
    write_stages,
)

TABLE = json.loads(
    (Path(__file__).parent / "data" / "staging_table.json").read_text())


def record(*classes, pid="p"):
    return PatientRecord(pid, tuple(classes))


class TestStagePatient:
    def test_frozen_table_replay(self):
        assert len(TABLE) == 4 ** 5
        for entry in TABLE:
            slides = tuple(parse_node_class(n) for n in entry["slides"])
            got = stage_patient(PatientRecord("p", slides))
            assert got.label == entry["stage"], entry

    @pytest.mark.parametrize("slides,expected", [
        ((NodeClass.Negative,) * 5, PNStage.pN0),
        ((NodeClass.ITC, NodeClass.ITC) + (NodeClass.Negative,) * 3,
         PNStage.pN0i),
        ((NodeClass.Micro,) + (NodeClass.Negative,) * 4, PNStage.pN1mi),
        ((NodeClass.Micro,) * 5, PNStage.pN1mi),  # micros alone never pN2
        ((NodeClass.Macro,) + (NodeClass.ITC,) * 4, PNStage.pN1),
        ((NodeClass.Macro,) + (NodeClass.Micro,) * 2
         + (NodeClass.Negative,) * 2, PNStage.pN1),
        ((NodeClass.Macro,) + (NodeClass.Micro,) * 3
         + (NodeClass.Negative,), PNStage.pN2),
        ((NodeClass.Macro,) * 5, PNStage.pN2),
    ])
    def test_clinical_spot_checks(self, slides, expected):
        assert stage_patient(record(*slides)) is expected

    def test_itc_not_positive(self):
        # a macro plus four ITCs is 1 positive node, not 5
        slides = (NodeClass.Macro,) + (NodeClass.ITC,) * 4
        assert stage_patient(record(*slides)) is PNStage.pN1

    def test_permutation_invariant(self):
        combos = [
            (0, 1, 2, 3, 3),
            (0, 0, 0, 1, 2),
            (3, 3, 2, 2, 1),
            (0, 2, 2, 2, 3),
        ]
        for combo in combos:
            stages = {
                stage_patient(record(*(NodeClass(c) for c in perm)))
                for perm in itertools.permutations(combo)
            }
            assert len(stages) == 1

    def test_monotone_in_slide_severity(self):
        # upgrading any one slide never lowers the patient stage
        for slides in itertools.product(range(4), repeat=5):
            base = stage_patient(record(*(NodeClass(c) for c in slides)))
            for i in range(5):
                for up in range(slides[i] + 1, 4):
                    worse = list(slides)
                    worse[i] = up
                    got = stage_patient(record(*(NodeClass(c) for c in worse)))
                    assert got >= base

    def test_wrong_slide_count(self):
        with pytest.raises(WrongSlideCount):
            record(NodeClass.Negative)
        with pytest.raises(WrongSlideCount):
            record(*(NodeClass.Negative,) * 6)

    def test_stage_all(self):
        recs = [record(*(NodeClass.Negative,) * 5, pid="a"),
                record(*(NodeClass.Macro,) * 5, pid="b")]
        stages = stage_all(recs)
        assert stages == {"a": PNStage.pN0, "b": PNStage.pN2}


class TestRulesData:
    def test_custom_rules_file(self, tmp_path):
        rules = {
            "classes": ["Negative", "ITC", "Micro", "Macro"],
            "stages": ["pN0", "pN2"],
            "rules": [
                {"stage": "pN2", "min_itc": 1},
                {"stage": "pN0"},
            ],
        }
        path = tmp_path / "rules.json"
        path.write_text(json.dumps(rules))
        table = load_rules(path)
        slides = (NodeClass.ITC,) + (NodeClass.Negative,) * 4
        assert stage_patient(record(*slides), table) is PNStage.pN2
        assert stage_patient(record(*(NodeClass.Negative,) * 5),
                             table) is PNStage.pN0

    def test_rules_missing_key(self, tmp_path):
        path = tmp_path / "rules.json"
        path.write_text(json.dumps({"classes": [], "stages": []}))
        with pytest.raises(ValueError):
            load_rules(path)

    def test_unknown_condition_rejected(self):
        bad = {"classes": [], "stages": [], "rules": [{"stage": "pN0",
                                                       "min_shiny": 1}]}
        with pytest.raises(ValueError):
            stage_patient(record(*(NodeClass.Negative,) * 5), bad)

    def test_packaged_default_loads(self):
        table = load_rules()
        assert table["rules"][-1] == {"stage": "pN0"}  # total fallback


class TestLabels:
    def test_stage_labels(self):
        assert PNStage.pN0i.label == "pN0(i+)"
        assert PNStage.pN1mi.label == "pN1mi"
        for stage in PNStage:
            assert parse_stage(stage.label) is stage

    def test_parse_errors(self):
        with pytest.raises(ValueError):
            parse_stage("pN9")
        with pytest.raises(ValueError):
            parse_node_class("Tumor")

    def test_severity_order(self):
        assert (NodeClass.Negative < NodeClass.ITC < NodeClass.Micro
                < NodeClass.Macro)
        assert (PNStage.pN0 < PNStage.pN0i < PNStage.pN1mi < PNStage.pN1
                < PNStage.pN2)


class TestCsv:
    def test_slide_labels_round_trip(self, tmp_path):
        rows = [("pat0", "s0", NodeClass.Negative),
                ("pat0", "s1", NodeClass.Macro),
                ("pat1", "s0", NodeClass.ITC)]
        path = tmp_path / "labels.csv"
        write_slide_labels(path, rows)
        assert read_slide_labels(path) == rows

    def test_slide_labels_header_check(self, tmp_path):
        path = tmp_path / "labels.csv"
        path.write_text("slide,class\ns0,Negative\n")
        with pytest.raises(ValueError):
            read_slide_labels(path)

    def test_group_patients(self):
        rows = [(f"pat{i % 2}", f"s{i}", NodeClass.Negative)
                for i in range(10)]
        recs = group_patients(rows)
        assert [r.patient_id for r in recs] == ["pat0", "pat1"]
        assert all(len(r.slides) == 5 for r in recs)

    def test_group_patients_wrong_count(self):
        rows = [("pat0", "s0", NodeClass.Negative)]
        with pytest.raises(WrongSlideCount):
            group_patients(rows)

    def test_stages_round_trip(self, tmp_path):
        stages = {"b": PNStage.pN2, "a": PNStage.pN0i}
        path = tmp_path / "stages.csv"
        write_stages(path, stages)
        assert read_stages(path) == stages
        # written in sorted patient order
        lines = path.read_text().splitlines()
        assert lines[1].startswith("a,") and lines[2].startswith("b,")

    def test_stages_header_check(self, tmp_path):
        path = tmp_path / "stages.csv"
        path.write_text("pid,label\na,pN0\n")
        with pytest.raises(ValueError):
            read_stages(path)
