"""
Tests for plane verdicts, quality reports, the annotated overlay and the
evaluation output files.
"""

import itertools
import json
import time

import numpy as np
import pandas as pd
import pytest

from data.dataset import NON_STANDARD, STANDARD, PhantomDataset
from data.image_io import GrayImage
from data.phantom import DegradeParams, generate_sample
from models.assessment import (
    QualityAssessor,
    QualityReport,
    StructureAssessment,
    annotate,
    assess,
    batch_assess,
    report_from_detections,
    verdict,
)
from models.classifier import REGISTRY
from models.config import ReportConfig, load_config
from models.errors import ConfigError, DataError
from models.evaluation import Evaluator, validation_scores, write_evaluation
from models.network import Detection, QualityNet

HEAD = REGISTRY.essential("head")


class TestVerdict:
    def test_all_flags_set(self):
        assert verdict({s: 1 for s in HEAD}, "head") == STANDARD

    def test_one_flag_missing(self):
        flags = {s: 1 for s in HEAD}
        flags["BM"] = 0
        assert verdict(flags, "head") == NON_STANDARD

    def test_clearing_a_flag_never_makes_a_plane_standard(self):
        for bits in itertools.product((0, 1), repeat=len(REGISTRY.essential("abdominal"))):
            flags = dict(zip(REGISTRY.essential("abdominal"), bits))
            for s in flags:
                lowered = dict(flags, **{s: 0})
                if verdict(lowered, "abdominal") == STANDARD:
                    assert verdict(flags, "abdominal") == STANDARD

    def test_unknown_structure(self):
        flags = {s: 1 for s in HEAD}
        flags["DAO"] = 1
        with pytest.raises(ConfigError):
            verdict(flags, "head")

    def test_incomplete_flags(self):
        with pytest.raises(ConfigError):
            verdict({"CSP": 1}, "head")


def _detection(structure_id, box, confidence=0.9, quality=0.8, flag=1):
    return Detection(
        box=np.asarray(box, dtype=float),
        structure_id=structure_id,
        class_index=REGISTRY.index_of(structure_id),
        confidence=confidence,
        quality=quality,
        flag=flag,
        level=3,
        objectness=0.7,
    )


class TestReport:
    def test_no_detections(self):
        report = report_from_detections("heart", [])
        assert report.verdict == NON_STANDARD
        assert all(s.flag == 0 and not s.detected for s in report.structures)
        assert [s.structure_id for s in report.structures] == list(REGISTRY.essential("heart"))

    def test_best_detection_per_structure(self):
        detections = [
            _detection("CSP", [0, 0, 10, 10], confidence=0.6, flag=0),
            _detection("CSP", [5, 5, 20, 20], confidence=0.9, flag=1),
        ]
        report = report_from_detections("head", detections)
        csp = report.structures[0]
        assert csp.box == (5.0, 5.0, 20.0, 20.0)
        assert csp.flag == 1
        assert report.failing == [s for s in HEAD if s != "CSP"]

    def test_every_structure_flagged(self):
        detections = [_detection(s, [i, i, i + 8, i + 8]) for i, s in enumerate(HEAD)]
        assert report_from_detections("head", detections).verdict == STANDARD

    def test_json_round_trip(self, tmp_path):
        report = report_from_detections("head", [_detection("T", [1, 2, 9, 12])], timing_s=0.25)
        path = tmp_path / "report.json"
        report.save(path)
        assert QualityReport.load(path) == report
        record = json.loads(path.read_text())
        assert record["structures"][1]["box"] == [1.0, 2.0, 9.0, 12.0]
        assert record["structures"][0]["box"] is None

    def test_unsupported_schema(self):
        record = report_from_detections("head", []).to_dict()
        record["schema_version"] = 99
        with pytest.raises(DataError):
            QualityReport.from_dict(record)

    def test_negative_timing(self):
        with pytest.raises(ConfigError):
            QualityReport("head", (), NON_STANDARD, timing_s=-1.0)


def _single_box_report(flag, verdict_label):
    structure = StructureAssessment("CSP", True, (10.0, 10.0, 30.0, 30.0), flag, 0.9)
    return QualityReport("head", (structure,), verdict_label)


class TestAnnotate:
    def test_dimensions_and_determinism(self, head_sample):
        report = _single_box_report(1, NON_STANDARD)
        a = annotate(head_sample.image, report)
        b = annotate(head_sample.image, report)
        assert a.pixels.shape == head_sample.image.pixels.shape
        assert np.array_equal(a.pixels, b.pixels)

    def test_box_outline(self):
        image = GrayImage(np.zeros((64, 64)))
        out = annotate(image, _single_box_report(1, NON_STANDARD), ReportConfig(banner_height=0)).pixels
        assert out[25, 10] == 1.0 and out[25, 29] == 1.0
        assert out[10, 25] == 1.0 and out[29, 25] == 1.0
        assert out[25, 5] == 0.0

    def test_flag_zero_drawn_gray(self):
        image = GrayImage(np.zeros((64, 64)))
        out = annotate(image, _single_box_report(0, NON_STANDARD), ReportConfig(banner_height=0)).pixels
        assert out[25, 10] == pytest.approx(128 / 255)

    def test_banner(self):
        image = GrayImage(np.full((64, 64), 0.5))
        standard = annotate(image, _single_box_report(1, STANDARD), ReportConfig(banner_height=8)).pixels
        rejected = annotate(image, _single_box_report(1, NON_STANDARD), ReportConfig(banner_height=8)).pixels
        assert standard[63, 63] == 1.0
        assert rejected[63, 63] == 0.0
        assert standard[40, 63] == rejected[40, 63] == pytest.approx(128 / 255)

    def test_empty_report_changes_only_banner(self, rng):
        image = GrayImage(rng.uniform(size=(64, 64)))
        out = annotate(image, report_from_detections("head", []), ReportConfig(banner_height=8)).pixels
        expected = image.to_uint8() / 255.0
        np.testing.assert_array_equal(out[:56], expected[:56])
        assert np.any(out[56:] != expected[56:])


class TestAssessor:
    def test_assess(self, tiny_net, head_sample):
        report = assess(tiny_net, head_sample.image, "head")
        assert [s.structure_id for s in report.structures] == list(HEAD)
        assert report.timing_s >= 0
        assert report.verdict == verdict(report.flags, "head")

    def test_section_outside_checkpoint(self, tiny_net, head_sample):
        with pytest.raises(ConfigError):
            QualityAssessor(tiny_net).assess(head_sample.image, "abdominal")

    def test_default_network_assesses_within_one_second(self):
        net = QualityNet(load_config(), seed=0, sections=("head",))
        sample = generate_sample("head", standard=True, params=DegradeParams(), seed=11, image_size=128)
        assessor = QualityAssessor(net)
        assessor.assess(sample.image, "head")
        start = time.perf_counter()
        report = assessor.assess(sample.image, "head")
        assert time.perf_counter() - start <= 1.0
        assert report.timing_s <= 1.0

    def test_batch_matches_sequential(self, tiny_net, head_sample):
        assessor = QualityAssessor(tiny_net)
        images = [head_sample.image, GrayImage(np.flipud(head_sample.image.pixels).copy())]
        sequential = [assessor.assess(image, "head") for image in images]
        parallel = batch_assess(assessor, images, ["head", "head"], n_jobs=2)
        for a, b in zip(sequential, parallel):
            assert a.structures == b.structures
            assert a.verdict == b.verdict

    def test_batch_length_mismatch(self, tiny_net, head_sample):
        with pytest.raises(ConfigError):
            batch_assess(QualityAssessor(tiny_net), [head_sample.image], ["head", "head"])


class TestEvaluation:
    def test_write_evaluation(self, tiny_net, phantom_dir, tmp_path):
        samples = PhantomDataset(phantom_dir).split("train")
        summary, timing = Evaluator(tiny_net).evaluate(samples)
        paths = write_evaluation(summary, timing, tmp_path / "eval")
        for path in paths.values():
            assert path.exists()

        metrics = json.loads(paths["metrics"].read_text())
        head = metrics["sections"]["head"]
        assert head["n_images"] == len(samples)
        assert set(head["plane"]) == {"counts", "acc", "spec", "sen", "prec", "f1", "auc"}
        assert set(head["structures"]) <= set(HEAD)
        assert metrics["parameters"]["total"] == tiny_net.parameters.count()

        timing_record = json.loads(paths["timing"].read_text())
        assert timing_record["frames"] == len(samples)

        table = pd.read_csv(paths["classification_table"])
        assert list(table.columns) == ["section", "Prec", "Sen", "ACC", "F1", "Spec", "AUC"]

        val_map, val_acc = validation_scores(summary)
        assert val_acc == pytest.approx(head["plane"]["acc"])

    def test_without_boxplot(self, tiny_net, phantom_dir, tmp_path):
        samples = PhantomDataset(phantom_dir).split("test")
        summary, timing = Evaluator(tiny_net).evaluate(samples)
        paths = write_evaluation(summary, timing, tmp_path, boxplot=False)
        assert "boxplot" not in paths
        assert not (tmp_path / "iou_boxplot.png").exists()
