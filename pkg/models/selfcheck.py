"""
Self-Verification Suite

Numerical and combinatorial checks run by ``fsqa selfcheck``:

- central-difference gradient checks (float64) of conv, relu, GAP, SPP, the
  relation module, focal loss and the combined training loss
- relation-weight column normalization on random and degenerate ROI sets
- focal loss reduction to cross-entropy and its monotonicity
- IoU and anchor-count arithmetic
- AP and AUC against brute-force oracles, and the classification formulas
- SPP output length across input sizes

The oracles here are deliberately naive: AP recomputes the greedy matching
for every score threshold, and AUC counts every positive/negative pair.

Example:
    >>> from models.selfcheck import run_selfcheck
    >>> report = run_selfcheck(trials=50)
    >>> report.passed
    True
"""

import time
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Dict, List, Sequence

import numpy as np
from loguru import logger

from models.backbone import global_avg_pool, spp, spp_length
from models.classifier import PROBABILITY_FLOOR, focal_loss, focal_loss_tensor
from models.config import DetectorConfig, RelationConfig
from models.detector import anchor_count, iou
from models.metrics import (
    ConfusionCounts,
    GroundTruthBox,
    ScoredBox,
    acc,
    average_precision,
    f1,
    prec,
    roc_auc,
    sen,
    spec,
)
from models.relation import RelationParams, RoiFeatureSet, relation_features, relation_weights
from models.tensor import Tensor, conv2d, grad_check, relu, sigmoid, softmax
from models.trainer import HeadOutputs, HeadTargets, LossWeights, total_loss

GRAD_TOLERANCE = 1e-4
GRAD_EPS = 1e-5
SPP_LEVELS = (1, 2, 4, 16)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str = ""
    seconds: float = 0.0


@dataclass
class SelfcheckReport:
    results: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def failures(self) -> List[CheckResult]:
        return [r for r in self.results if not r.passed]

    def lines(self) -> List[str]:
        return [
            f"[{'PASS' if r.passed else 'FAIL'}] {r.name} ({r.seconds:.2f}s){': ' + r.detail if r.detail else ''}"
            for r in self.results
        ]


# -- brute-force oracles ----------------------------------------------------


def _plain_iou(a: Sequence[float], b: Sequence[float]) -> float:
    ix = min(a[2], b[2]) - max(a[0], b[0])
    iy = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _greedy_true_positives(dets: List[tuple], gts: List[GroundTruthBox], iou_threshold: float) -> int:
    matched = [False] * len(gts)
    tp = 0
    for _, _, det in sorted(dets):
        best, best_iou = -1, -1.0
        for j, gt in enumerate(gts):
            if matched[j] or gt.image_id != det.image_id:
                continue
            overlap = _plain_iou(det.box, gt.box)
            if overlap > best_iou:
                best, best_iou = j, overlap
        if best >= 0 and best_iou > iou_threshold:
            matched[best] = True
            tp += 1
    return tp


def brute_force_ap(
    detections: Sequence[ScoredBox], ground_truths: Sequence[GroundTruthBox], iou_threshold: float = 0.5
) -> Dict[str, float]:
    """AP per class by enumerating every score threshold."""
    by_class_gt: Dict[str, List[GroundTruthBox]] = defaultdict(list)
    for g in ground_truths:
        by_class_gt[g.class_id].append(g)
    result = {}
    for class_id, gts in sorted(by_class_gt.items()):
        dets = [(-d.score, i, d) for i, d in enumerate(detections) if d.class_id == class_id]
        points = []
        for threshold in sorted({-s for s, _, _ in dets}, reverse=True):
            kept = [item for item in dets if -item[0] >= threshold]
            tp = _greedy_true_positives(kept, gts, iou_threshold)
            points.append((Fraction(tp, len(gts)), Fraction(tp, len(kept))))
        area = Fraction(0)
        previous_recall = Fraction(0)
        for k in range(len(points)):
            recall = points[k][0]
            best_precision = max(p for _, p in points[k:])
            area += (recall - previous_recall) * best_precision
            previous_recall = recall
        result[class_id] = float(area)
    return result


def brute_force_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """(2·#{pos > neg} + #{pos = neg}) / (2·P·N) over every pair."""
    positives = [s for s, y in zip(scores, labels) if y == 1]
    negatives = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1 for p in positives for n in negatives if p > n)
    ties = sum(1 for p in positives for n in negatives if p == n)
    return float(Fraction(2 * wins + ties, 2 * len(positives) * len(negatives)))


def random_detection_instance(rng: np.random.Generator, max_detections: int = 6, max_ground_truths: int = 3):
    """Small integer-coordinate instance with tied scores and two images."""

    def box():
        x0, y0 = rng.integers(0, 6, size=2)
        w, h = rng.integers(1, 5, size=2)
        return (float(x0), float(y0), float(x0 + w), float(y0 + h))

    classes = ["A", "B"]
    images = ["img0", "img1"]
    n_gt = int(rng.integers(1, max_ground_truths + 1))
    gts = [GroundTruthBox(str(rng.choice(images)), str(rng.choice(classes)), box()) for _ in range(n_gt)]
    n_det = int(rng.integers(0, max_detections + 1))
    dets = []
    for _ in range(n_det):
        if gts and rng.random() < 0.6:
            g = gts[int(rng.integers(len(gts)))]
            jitter = rng.integers(-1, 2, size=4)
            candidate = tuple(float(v) for v in np.asarray(g.box) + jitter)
            if candidate[2] <= candidate[0] or candidate[3] <= candidate[1]:
                candidate = g.box
            dets.append(ScoredBox(g.image_id, g.class_id, candidate, float(rng.integers(1, 5)) / 4))
        else:
            score = float(rng.integers(1, 5)) / 4
            dets.append(ScoredBox(str(rng.choice(images)), str(rng.choice(classes)), box(), score))
    return dets, gts


# -- checks -----------------------------------------------------------------


def _gradient_functions(rng: np.random.Generator) -> Dict[str, Callable[[], float]]:
    """Each entry evaluates one gradient check at a fresh random point."""

    def conv_check():
        kernel = rng.normal(size=(3, 2, 3, 3))
        bias = Tensor(rng.normal(size=3))
        cotangent = rng.normal(size=(3, 3, 3))
        return grad_check(
            lambda x: (conv2d(x, Tensor(kernel), bias, stride=2, padding=1) * cotangent).sum(),
            rng.normal(size=(2, 6, 6)),
            GRAD_EPS,
        )

    def conv_kernel_check():
        x = Tensor(rng.normal(size=(2, 5, 5)))
        cotangent = rng.normal(size=(2, 5, 5))
        return grad_check(
            lambda k: (conv2d(x, k, padding=1) * cotangent).sum(), rng.normal(size=(2, 2, 3, 3)), GRAD_EPS
        )

    def relu_check():
        cotangent = rng.normal(size=12)
        return grad_check(lambda x: (relu(x) * cotangent).sum(), rng.normal(size=12), GRAD_EPS)

    def gap_check():
        cotangent = rng.normal(size=3)
        return grad_check(lambda x: (global_avg_pool(x) * cotangent).sum(), rng.normal(size=(3, 5, 4)), GRAD_EPS)

    def spp_check():
        cotangent = rng.normal(size=spp_length(2, (1, 2, 4)))
        return grad_check(lambda x: (spp(x, (1, 2, 4)) * cotangent).sum(), rng.normal(size=(2, 7, 6)), GRAD_EPS)

    def relation_check():
        config = RelationConfig(d_k=4, d_g=8, d_f=6)
        params = RelationParams(
            W_G=Tensor(rng.normal(size=8)),
            W_K=Tensor(rng.normal(size=(4, 6)) * 0.5),
            W_Q=Tensor(rng.normal(size=(4, 6)) * 0.5),
            W_V=Tensor(rng.normal(size=(6, 6)) * 0.5),
        )
        corners = rng.uniform(0, 50, size=(4, 2))
        sizes = rng.uniform(5, 30, size=(4, 2))
        geometry = np.concatenate([corners, sizes], axis=1)
        cotangent = rng.normal(size=(4, 6))

        def f(x):
            roi_set = RoiFeatureSet(x, geometry)
            return (relation_features(roi_set, relation_weights(roi_set, params, config), params) * cotangent).sum()

        return grad_check(f, rng.normal(size=(4, 6)), GRAD_EPS)

    def focal_check():
        gamma = float(rng.choice([0.0, 1.0, 2.0, 5.0]))
        return grad_check(lambda p: focal_loss_tensor(p, gamma).sum(), rng.uniform(0.05, 0.95, size=8), GRAD_EPS)

    def total_loss_check():
        targets = HeadTargets(
            objectness=rng.integers(0, 2, size=4),
            box_targets=rng.normal(size=(2, 4)),
            class_targets=rng.integers(0, 16, size=3),
            quality_targets=rng.integers(0, 2, size=3),
            quality_mask=np.array([True, False, True]),
        )

        def f(x):
            outputs = HeadOutputs(
                objectness_prob=sigmoid(x[0:4]),
                deltas=x[4:12].reshape(2, 4) * 0.3,
                class_probs=softmax(x[12:60].reshape(3, 16), axis=1),
                quality_prob=sigmoid(x[60:63]),
            )
            loss, _ = total_loss(outputs, targets, LossWeights(), gamma=2.0)
            return loss

        return grad_check(f, rng.normal(size=63), GRAD_EPS)

    return {
        "conv2d (input)": conv_check,
        "conv2d (kernel)": conv_kernel_check,
        "relu": relu_check,
        "global average pooling": gap_check,
        "spatial pyramid pooling": spp_check,
        "relation module": relation_check,
        "focal loss": focal_check,
        "total loss": total_loss_check,
    }


def check_gradients(seed: int = 0, points: int = 10) -> List[CheckResult]:
    results = []
    rng = np.random.default_rng(seed)
    for name, fn in _gradient_functions(rng).items():
        start = time.perf_counter()
        worst = max(fn() for _ in range(points))
        results.append(
            CheckResult(
                f"gradient: {name}",
                worst <= GRAD_TOLERANCE,
                f"max relative error {worst:.2e}",
                time.perf_counter() - start,
            )
        )
    return results


def check_relation_normalization(seed: int = 0, trials: int = 1000) -> CheckResult:
    """Columns sum to 1 and are non-negative, including all-zero geometry weights."""
    rng = np.random.default_rng(seed)
    config = RelationConfig(d_k=4, d_g=8, d_f=6)
    worst = 0.0
    negative = False
    for trial in range(trials):
        n = int(rng.integers(1, 9))
        degenerate = trial % 4 == 0
        params = RelationParams(
            W_G=Tensor(np.zeros(8) if degenerate else rng.normal(size=8)),
            W_K=Tensor(rng.normal(size=(4, 6))),
            W_Q=Tensor(rng.normal(size=(4, 6))),
            W_V=Tensor(rng.normal(size=(6, 6))),
        )
        if trial % 4 == 1:
            # identical boxes: every relative-geometry embedding is the same
            geometry = np.tile([10.0, 10.0, 4.0, 4.0], (n, 1))
        else:
            geometry = np.concatenate([rng.uniform(0, 100, size=(n, 2)), rng.uniform(1, 40, size=(n, 2))], axis=1)
        weights = relation_weights(RoiFeatureSet(Tensor(rng.normal(size=(n, 6))), geometry), params, config).values
        worst = max(worst, float(np.max(np.abs(weights.sum(axis=0) - 1.0))))
        negative = negative or bool((weights < 0).any())
    passed = worst <= 1e-9 and not negative
    return CheckResult("relation weight normalization", passed, f"max column error {worst:.1e}")


def check_focal_reduction() -> CheckResult:
    grid = np.linspace(0.01, 0.99, 99)
    worst = max(abs(focal_loss(p, 0.0) + np.log(max(p, PROBABILITY_FLOOR))) for p in grid)
    monotone = all(
        all(focal_loss(a, g) > focal_loss(b, g) for a, b in zip(grid[:-1], grid[1:])) for g in (0.0, 1.0, 2.0, 5.0)
    )
    return CheckResult(
        "focal loss reduction and monotonicity",
        worst <= 1e-12 and monotone,
        f"max |FL_0 + ln p_t| = {worst:.1e}",
    )


def check_box_arithmetic() -> CheckResult:
    value = iou((0, 0, 2, 2), (1, 1, 3, 3))
    exact = Fraction(value).limit_denominator(1000) == Fraction(1, 7) and value == 1 / 7
    count = anchor_count(256, 256, DetectorConfig())
    expected = 3 * (32 ** 2 + 16 ** 2 + 8 ** 2 + 4 ** 2 + 2 ** 2)
    return CheckResult(
        "IoU and anchor arithmetic",
        exact and count == expected,
        f"iou={value!r}, anchors={count} (expected {expected})",
    )


def check_ap_oracle(ap_fn: Callable = average_precision, seed: int = 0, trials: int = 500) -> CheckResult:
    rng = np.random.default_rng(seed)
    fixture = [ScoredBox("i", "A", (0, 0, 2, 2), s) for s in (0.9, 0.8, 0.7)]
    fixture[1] = ScoredBox("i", "A", (10, 10, 12, 12), 0.8)
    fixture[2] = ScoredBox("i", "A", (4, 4, 6, 6), 0.7)
    gts = [GroundTruthBox("i", "A", (0, 0, 2, 2)), GroundTruthBox("i", "A", (4, 4, 6, 6))]
    fixture_ap = ap_fn(fixture, gts, 0.5).get("A")
    if fixture_ap is None or abs(fixture_ap - 5 / 6) > 1e-12:
        return CheckResult("AP oracle", False, f"ranked fixture gave {fixture_ap}, expected 0.8333")
    for trial in range(trials):
        dets, gts = random_detection_instance(rng)
        got, expected = ap_fn(dets, gts, 0.5), brute_force_ap(dets, gts, 0.5)
        if got != expected:
            return CheckResult("AP oracle", False, f"instance {trial}: {got} != oracle {expected}")
    return CheckResult("AP oracle", True, f"{trials} random instances")


def check_auc_oracle(auc_fn: Callable = roc_auc, seed: int = 0, trials: int = 500) -> CheckResult:
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, size=n)
        labels[0], labels[1] = 1, 0
        scores = rng.integers(0, 10, size=n) / 10
        got, _ = auc_fn(scores, labels)
        expected = brute_force_auc(scores.tolist(), labels.tolist())
        if got != expected:
            return CheckResult("AUC oracle", False, f"instance {trial}: {got} != oracle {expected}")
    return CheckResult("AUC oracle", True, f"{trials} random instances")


def check_classification_formulas() -> CheckResult:
    cases = [
        (ConfusionCounts(9, 1, 1, 9), {"acc": 0.9, "spec": 0.9, "sen": 0.9, "prec": 0.9, "f1": 0.9}),
        (ConfusionCounts(5, 5, 5, 5), {"acc": 0.5, "f1": 0.5}),
        (ConfusionCounts(3, 0, 0, 4), {"acc": 1.0, "spec": 1.0, "sen": 1.0, "prec": 1.0, "f1": 1.0}),
    ]
    functions = {"acc": acc, "spec": spec, "sen": sen, "prec": prec, "f1": f1}
    for counts, expected in cases:
        for name, value in expected.items():
            got = functions[name](counts)
            if abs(got - value) > 1e-12:
                return CheckResult("classification formulas", False, f"{name}({counts}) = {got}, expected {value}")
    return CheckResult("classification formulas", True)


def check_spp_invariance(channels: int = 2, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    lengths = {
        size: spp(Tensor(rng.normal(size=(channels, size, size))), SPP_LEVELS).size for size in (32, 64, 128, 256)
    }
    expected = spp_length(channels, SPP_LEVELS)
    passed = set(lengths.values()) == {expected}
    return CheckResult("SPP size invariance", passed, f"lengths {lengths}, expected {expected} = 277*C")


def run_selfcheck(
    ap_fn: Callable = average_precision,
    auc_fn: Callable = roc_auc,
    seed: int = 0,
    trials: int = 500,
    gradient_points: int = 10,
) -> SelfcheckReport:
    """Run every check; ``ap_fn``/``auc_fn`` can be swapped to test the oracles."""
    report = SelfcheckReport()
    logger.info("Running self-checks...")
    report.results.extend(check_gradients(seed, gradient_points))
    timed = [
        lambda: check_relation_normalization(seed, max(trials * 2, 1)),
        check_focal_reduction,
        check_box_arithmetic,
        lambda: check_ap_oracle(ap_fn, seed, trials),
        lambda: check_auc_oracle(auc_fn, seed, trials),
        check_classification_formulas,
        lambda: check_spp_invariance(seed=seed),
    ]
    for check in timed:
        start = time.perf_counter()
        result = check()
        result.seconds = time.perf_counter() - start
        report.results.append(result)
    for result in report.failures():
        logger.error(f"Self-check failed: {result.name}: {result.detail}")
    logger.info(f"Self-checks: {len(report.results) - len(report.failures())}/{len(report.results)} passed")
    return report
