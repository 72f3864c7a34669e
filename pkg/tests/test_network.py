"""
Tests for the assembled network: forward pass, detection and checkpoints.
"""

import numpy as np
import pytest
from joblib import Parallel, delayed
from numpy.testing import assert_array_equal

from models.checkpoint import load_checkpoint, save_checkpoint
from models.classifier import REGISTRY
from models.detector import anchor_count
from models.errors import ConfigError, DimensionError
from models.network import QualityNet


class TestForward:
    def test_shapes(self, tiny_net, head_sample):
        forward = tiny_net.forward(head_sample.image)
        assert forward.image_size == (64, 64)
        assert sorted(forward.pyramid) == [3, 4, 5, 6, 7]
        assert forward.rpn.logits.shape == (anchor_count(64, 64, tiny_net.config.detector),)
        assert len(forward.anchors) == anchor_count(64, 64, tiny_net.config.detector)

    def test_anchor_cache_shared_across_threads(self, tiny_net):
        sets = Parallel(n_jobs=4, prefer="threads")(delayed(tiny_net.anchors)(64, 64) for _ in range(16))
        assert all(s is sets[0] for s in sets)
        assert len(sets[0]) == anchor_count(64, 64, tiny_net.config.detector)

    def test_too_small_image(self, tiny_net):
        with pytest.raises(DimensionError):
            tiny_net.forward(np.zeros((16, 16)))

    def test_classify_rois(self, tiny_net, head_sample):
        forward = tiny_net.forward(head_sample.image)
        probs, quality = tiny_net.classify_rois(forward, head_sample.boxes, "head")
        assert probs.shape == (len(head_sample.annotations), REGISTRY.num_classes)
        assert np.allclose(probs.values.sum(axis=1), 1.0)
        assert np.all((quality.values > 0) & (quality.values < 1))


class TestDetect:
    def test_detections_belong_to_section(self, tiny_net, head_sample):
        result = tiny_net.detect(head_sample.image, "head")
        essential = set(REGISTRY.essential("head"))
        assert len(result.proposals) <= tiny_net.config.detector.top_k
        for d in result.detections:
            assert d.structure_id in essential
            assert d.flag == int(d.quality >= tiny_net.config.classifier.quality_cutoff)
            assert 0 <= d.box[0] < d.box[2] <= 64 and 0 <= d.box[1] < d.box[3] <= 64
        confidences = [d.confidence for d in result.detections]
        assert confidences == sorted(confidences, reverse=True)
        assert result.seconds >= 0

    def test_deterministic(self, tiny_net, head_sample):
        a = tiny_net.detect(head_sample.image, "head")
        b = tiny_net.detect(head_sample.image, "head")
        assert [d.to_dict() for d in a.detections] == [d.to_dict() for d in b.detections]

    def test_relation_weights_are_column_stochastic(self, tiny_net, head_sample):
        result = tiny_net.detect(head_sample.image, "head")
        for weights in result.relation_weights:
            assert np.allclose(weights.values.sum(axis=0), 1.0)

    def test_section_not_trained(self, tiny_net, head_sample):
        with pytest.raises(ConfigError):
            tiny_net.detect(head_sample.image, "heart")


class TestParameters:
    def test_report_groups(self, tiny_net):
        report = tiny_net.parameter_report()
        assert set(report) == {"FEN", "RPN", "ROI projection", "Relation", "CPN", "total"}
        assert report["total"] == sum(v for k, v in report.items() if k != "total")

    def test_same_seed_same_weights(self, tiny_config):
        a = QualityNet(tiny_config, seed=5, sections=("head",))
        b = QualityNet(tiny_config, seed=5, sections=("head",))
        for (_, x), (_, y) in zip(a.parameters, b.parameters):
            assert_array_equal(x.values, y.values)

    def test_checkpoint_round_trip(self, tiny_net, head_sample, tmp_path):
        path = tmp_path / "net.joblib"
        save_checkpoint(path, tiny_net.parameters, tiny_net.config.to_dict(), tiny_net.sections, epoch=0)
        restored = QualityNet.from_checkpoint(load_checkpoint(path))
        assert restored.sections == ["head"]
        a = tiny_net.detect(head_sample.image, "head")
        b = restored.detect(head_sample.image, "head")
        assert [d.to_dict() for d in a.detections] == [d.to_dict() for d in b.detections]

    def test_unknown_section(self, tiny_config):
        with pytest.raises(ConfigError):
            QualityNet(tiny_config, sections=("femur",))
