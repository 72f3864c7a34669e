"""
Tests for the classification and detection metrics and their brute-force
oracles.
"""

import json

import numpy as np
import pytest
from sklearn.metrics import roc_auc_score

from models.errors import ContractError, DimensionError, ParameterError
from models.metrics import (
    UNDEFINED,
    ClassificationMetrics,
    ConfusionCounts,
    GroundTruthBox,
    ScoredBox,
    acc,
    average_precision,
    class_average_precision,
    confusion,
    f1,
    iou_quartiles,
    is_defined,
    mean_ap,
    prec,
    roc_auc,
    sen,
    spec,
    to_json_value,
)
from models.selfcheck import (
    brute_force_ap,
    brute_force_auc,
    check_ap_oracle,
    check_auc_oracle,
    random_detection_instance,
)


class TestConfusion:
    def test_counts(self):
        c = confusion([1, 1, 0, 0, 1], [1, 0, 0, 1, 1])
        assert c == ConfusionCounts(tp=2, fp=1, fn=1, tn=1)

    def test_twenty_item_fixture(self):
        pred = [1] * 9 + [0] + [1] + [0] * 9
        true = [1] * 10 + [0] * 10
        c = confusion(pred, true)
        assert (c.tp, c.fp, c.fn, c.tn) == (9, 1, 1, 9)
        for metric in (acc, spec, sen, prec, f1):
            assert metric(c) == pytest.approx(0.9)

    def test_balanced_counts(self):
        c = ConfusionCounts(5, 5, 5, 5)
        assert acc(c) == 0.5
        assert f1(c) == 0.5

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            confusion([1, 0], [1])

    def test_non_binary_flags(self):
        with pytest.raises(ParameterError):
            confusion([2, 0], [1, 0])

    def test_negative_counts(self):
        with pytest.raises(ParameterError):
            ConfusionCounts(tp=-1)


class TestClassificationMetrics:
    def test_zero_denominators_are_undefined(self):
        c = ConfusionCounts(tp=0, fp=0, fn=0, tn=4)
        assert prec(c) is UNDEFINED
        assert sen(c) is UNDEFINED
        assert f1(c) is UNDEFINED
        assert spec(c) == 1.0
        assert acc(ConfusionCounts()) is UNDEFINED

    def test_undefined_serializes_as_null(self):
        record = ClassificationMetrics(ConfusionCounts(tn=3)).to_dict()
        assert record["prec"] is None
        assert json.loads(json.dumps(record))["auc"] is None
        assert to_json_value(np.float64(0.25)) == 0.25

    @pytest.mark.parametrize("counts", [(3, 1, 2, 7), (1, 4, 0, 2), (8, 2, 5, 0)])
    def test_f1_is_harmonic_mean(self, counts):
        c = ConfusionCounts(*counts)
        p, r = prec(c), sen(c)
        assert f1(c) == pytest.approx(2 * p * r / (p + r))

    def test_sensitivity_grows_with_true_positives(self):
        values = [sen(ConfusionCounts(tp=tp, fn=5)) for tp in range(1, 10)]
        assert values == sorted(values)

    def test_single_class_labels_leave_auc_undefined(self):
        metrics = ClassificationMetrics.from_predictions([1, 1], [1, 1], scores=[0.4, 0.9])
        assert metrics.auc is UNDEFINED
        assert not is_defined(metrics.auc)


class TestRocAuc:
    def test_perfect_ranking(self):
        auc, _ = roc_auc([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0])
        assert auc == 1.0

    def test_inverted_ranking(self):
        auc, _ = roc_auc([0.1, 0.2, 0.8, 0.9], [1, 1, 0, 0])
        assert auc == 0.0

    def test_constant_scores(self):
        auc, curve = roc_auc([0.5] * 4, [1, 0, 1, 0])
        assert auc == 0.5
        assert curve.fpr.tolist() == [0.0, 1.0]

    def test_curve_endpoints(self):
        _, curve = roc_auc([0.9, 0.6, 0.6, 0.2, 0.1], [1, 0, 1, 0, 1])
        assert (curve.fpr[0], curve.tpr[0]) == (0.0, 0.0)
        assert (curve.fpr[-1], curve.tpr[-1]) == (1.0, 1.0)
        assert np.all(np.diff(curve.fpr) >= 0) and np.all(np.diff(curve.tpr) >= 0)

    @pytest.mark.parametrize("seed", range(5))
    def test_agrees_with_sklearn(self, seed):
        rng = np.random.default_rng(seed)
        labels = rng.integers(0, 2, size=40)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 8, size=40) / 8
        auc, _ = roc_auc(scores, labels)
        assert auc == pytest.approx(roc_auc_score(labels, scores), abs=1e-12)

    def test_single_class(self):
        with pytest.raises(ContractError):
            roc_auc([0.1, 0.2], [1, 1])


def _gt(box, cls="A", image="i"):
    return GroundTruthBox(image, cls, box)


def _det(box, score, cls="A", image="i"):
    return ScoredBox(image, cls, box, score)


class TestAveragePrecision:
    def test_ranked_fixture(self):
        dets = [_det((0, 0, 2, 2), 0.9), _det((10, 10, 12, 12), 0.8), _det((4, 4, 6, 6), 0.7)]
        gts = [_gt((0, 0, 2, 2)), _gt((4, 4, 6, 6))]
        assert average_precision(dets, gts)["A"] == pytest.approx(5 / 6, abs=1e-12)

    def test_all_hits_ranked_first(self):
        dets = [_det((0, 0, 2, 2), 0.9), _det((4, 4, 6, 6), 0.8), _det((20, 20, 22, 22), 0.1)]
        gts = [_gt((0, 0, 2, 2)), _gt((4, 4, 6, 6))]
        assert average_precision(dets, gts)["A"] == 1.0

    def test_no_hits(self):
        dets = [_det((10, 10, 12, 12), 0.9)]
        assert average_precision(dets, [_gt((0, 0, 2, 2))])["A"] == 0.0

    def test_no_detections(self):
        assert class_average_precision([], [_gt((0, 0, 2, 2))]) == 0.0

    def test_duplicate_detection_is_a_false_positive(self):
        dets = [_det((0, 0, 2, 2), 0.9), _det((0, 0, 2, 2), 0.8)]
        assert average_precision(dets, [_gt((0, 0, 2, 2))])["A"] == 1.0
        dets = [_det((0, 0, 2, 2), 0.8), _det((0, 0, 2, 2), 0.9)]
        assert average_precision(dets, [_gt((0, 0, 2, 2)), _gt((5, 5, 7, 7))])["A"] == 0.5

    def test_matching_stays_within_an_image(self):
        dets = [_det((0, 0, 2, 2), 0.9, image="other")]
        assert average_precision(dets, [_gt((0, 0, 2, 2))])["A"] == 0.0

    def test_iou_at_threshold_is_a_miss(self):
        dets = [_det((0, 0, 2, 1), 0.9)]
        assert average_precision(dets, [_gt((0, 0, 2, 2))], iou_threshold=0.5)["A"] == 0.0

    def test_class_without_ground_truths_excluded(self):
        dets = [_det((0, 0, 2, 2), 0.9), _det((0, 0, 2, 2), 0.9, cls="B")]
        result = average_precision(dets, [_gt((0, 0, 2, 2))])
        assert set(result) == {"A"}

    def test_mean_ap(self):
        assert mean_ap({"A": 1.0, "B": 0.5}) == 0.75
        assert mean_ap({}) is UNDEFINED

    def test_class_without_ground_truths_rejected_directly(self):
        with pytest.raises(ContractError):
            class_average_precision([_det((0, 0, 1, 1), 0.5)], [])


class TestIouQuartiles:
    def test_four_values(self):
        stats = iou_quartiles([1, 2, 3, 4])
        assert stats.q1 == pytest.approx(1.75)
        assert stats.median == pytest.approx(2.5)
        assert stats.q3 == pytest.approx(3.25)
        assert (stats.minimum, stats.maximum) == (1.0, 4.0)

    def test_single_value(self):
        stats = iou_quartiles([0.5])
        assert stats.to_dict() == {"min": 0.5, "q1": 0.5, "median": 0.5, "q3": 0.5, "max": 0.5}

    def test_empty(self):
        with pytest.raises(ContractError):
            iou_quartiles([])


class TestOracles:
    @pytest.mark.parametrize("seed", range(3))
    def test_average_precision_matches_enumeration(self, seed):
        rng = np.random.default_rng(seed)
        for _ in range(100):
            dets, gts = random_detection_instance(rng)
            assert average_precision(dets, gts, 0.5) == brute_force_ap(dets, gts, 0.5)

    def test_auc_matches_pair_counting(self, rng):
        for _ in range(100):
            labels = rng.integers(0, 2, size=12)
            labels[:2] = [1, 0]
            scores = rng.integers(0, 4, size=12) / 4
            assert roc_auc(scores, labels)[0] == brute_force_auc(scores.tolist(), labels.tolist())

    def test_ap_oracle_passes(self):
        assert check_ap_oracle(trials=100).passed

    def test_ap_oracle_catches_a_wrong_implementation(self):
        def inflated_ap(detections, ground_truths, iou_threshold):
            exact = average_precision(detections, ground_truths, iou_threshold)
            return {k: min(1.0, v + 0.01) for k, v in exact.items()}

        result = check_ap_oracle(ap_fn=inflated_ap, trials=100)
        assert not result.passed

    def test_auc_oracle_catches_a_wrong_implementation(self):
        def shifted(scores, labels):
            auc, curve = roc_auc(scores, labels)
            return auc * 0.99, curve

        assert check_auc_oracle(trials=50).passed
        assert not check_auc_oracle(auc_fn=shifted, trials=50).passed
