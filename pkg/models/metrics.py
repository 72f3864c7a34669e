"""
Evaluation Metrics

Detection (IoU quartiles, AP and mAP) and classification (ACC, Spec, Sen,
Prec, F1, ROC/AUC) indicators.

AP uses greedy matching per image and class: detections are visited by
descending score, each takes the best still-unmatched ground truth of its
image with IoU strictly above the threshold. Detections with equal scores
form one operating point. AP is the area under the all-point interpolated
precision envelope, computed in exact rational arithmetic.

A metric whose denominator is zero is ``UNDEFINED`` (serialized as null),
never 0.

Example:
    >>> from models.metrics import ConfusionCounts, acc, f1
    >>> c = ConfusionCounts(tp=9, fp=1, fn=1, tn=9)
    >>> acc(c), f1(c)
    (0.9, 0.9)
"""

from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger

from models.detector import iou_matrix
from models.errors import ContractError, DimensionError, ParameterError


class _Undefined:
    """Marker for a metric with a zero denominator."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __bool__(self):
        return False

    def __repr__(self):
        return "UNDEFINED"

    def __reduce__(self):
        return (_Undefined, ())


UNDEFINED = _Undefined()

MetricValue = Union[float, _Undefined]


def is_defined(value) -> bool:
    return value is not UNDEFINED


def to_json_value(value):
    """UNDEFINED becomes None; numpy scalars become Python floats."""
    if value is UNDEFINED or value is None:
        return None
    return float(value)


def _ratio(numerator: int, denominator: int, name: str) -> MetricValue:
    if denominator == 0:
        logger.warning(f"{name} is undefined (zero denominator)")
        return UNDEFINED
    return numerator / denominator


# -- classification ---------------------------------------------------------


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ParameterError(f"Confusion counts must be non-negative: {self}")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def to_dict(self) -> Dict[str, int]:
        return {"tp": self.tp, "fp": self.fp, "fn": self.fn, "tn": self.tn}


def _binary(values, name: str) -> np.ndarray:
    array = np.asarray(values).ravel()
    if array.size and not np.isin(array, (0, 1)).all():
        raise ParameterError(f"{name} must be binary (0/1)")
    return array.astype(int)


def confusion(pred_flags: Sequence[int], true_flags: Sequence[int]) -> ConfusionCounts:
    """Counts of (prediction, truth) pairs with 1 as the positive class.

    Raises:
        DimensionError: If the sequences differ in length
    """
    pred = _binary(pred_flags, "pred_flags")
    true = _binary(true_flags, "true_flags")
    if pred.shape != true.shape:
        raise DimensionError(f"Length mismatch: {pred.size} predictions vs {true.size} labels")
    return ConfusionCounts(
        tp=int(((pred == 1) & (true == 1)).sum()),
        fp=int(((pred == 1) & (true == 0)).sum()),
        fn=int(((pred == 0) & (true == 1)).sum()),
        tn=int(((pred == 0) & (true == 0)).sum()),
    )


def acc(c: ConfusionCounts) -> MetricValue:
    return _ratio(c.tp + c.tn, c.total, "ACC")


def spec(c: ConfusionCounts) -> MetricValue:
    return _ratio(c.tn, c.tn + c.fp, "Spec")


def sen(c: ConfusionCounts) -> MetricValue:
    return _ratio(c.tp, c.tp + c.fn, "Sen")


def prec(c: ConfusionCounts) -> MetricValue:
    return _ratio(c.tp, c.tp + c.fp, "Prec")


def f1(c: ConfusionCounts) -> MetricValue:
    """2TP / (2TP + FP + FN), the harmonic mean of Prec and Sen."""
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "F1")


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray

    def to_dict(self) -> Dict[str, List[float]]:
        return {
            "fpr": [float(v) for v in self.fpr],
            "tpr": [float(v) for v in self.tpr],
            "thresholds": [float(v) for v in self.thresholds],
        }


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> Tuple[float, RocCurve]:
    """Area under the ROC curve by trapezoids over distinct thresholds.

    The integer numerator sum(dFP * (TP_i + TP_i-1)) over 2PN equals the
    Mann-Whitney pair-ranking probability with ties counted 1/2.

    Raises:
        ContractError: If labels hold only one class
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = _binary(labels, "labels")
    if scores.shape != labels.shape:
        raise DimensionError(f"Length mismatch: {scores.size} scores vs {labels.size} labels")
    n_pos = int(labels.sum())
    n_neg = int(labels.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise ContractError("ROC/AUC needs at least one positive and one negative label")

    thresholds, inverse = np.unique(-scores, return_inverse=True)
    pos_per = np.bincount(inverse, weights=labels, minlength=len(thresholds)).astype(int)
    neg_per = np.bincount(inverse, weights=1 - labels, minlength=len(thresholds)).astype(int)
    tp = np.concatenate([[0], np.cumsum(pos_per)])
    fp = np.concatenate([[0], np.cumsum(neg_per)])

    numerator = int(np.sum(np.diff(fp) * (tp[1:] + tp[:-1])))
    auc = float(Fraction(numerator, 2 * n_pos * n_neg))
    curve = RocCurve(
        fpr=fp / n_neg,
        tpr=tp / n_pos,
        thresholds=np.concatenate([[np.inf], -thresholds]),
    )
    return auc, curve


# -- detection --------------------------------------------------------------


@dataclass(frozen=True)
class ScoredBox:
    image_id: str
    class_id: str
    box: Tuple[float, float, float, float]
    score: float


@dataclass(frozen=True)
class GroundTruthBox:
    image_id: str
    class_id: str
    box: Tuple[float, float, float, float]


def match_detections(
    detections: Sequence[ScoredBox],
    ground_truths: Sequence[GroundTruthBox],
    iou_threshold: float = 0.5,
) -> np.ndarray:
    """Greedy true-positive flags for detections of a single class.

    Detections are visited by descending score (ties by input order); the
    flags are returned in that visiting order.
    """
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].score, i))
    by_image: Dict[str, List[int]] = defaultdict(list)
    for j, gt in enumerate(ground_truths):
        by_image[gt.image_id].append(j)
    gt_boxes = np.array([g.box for g in ground_truths], dtype=np.float64).reshape(-1, 4)
    matched = np.zeros(len(ground_truths), dtype=bool)
    hits = np.zeros(len(order), dtype=bool)
    for rank, i in enumerate(order):
        candidates = [j for j in by_image.get(detections[i].image_id, []) if not matched[j]]
        if not candidates:
            continue
        overlaps = iou_matrix(np.asarray(detections[i].box, dtype=np.float64)[None, :], gt_boxes[candidates])[0]
        best = int(np.argmax(overlaps))
        if overlaps[best] > iou_threshold:
            matched[candidates[best]] = True
            hits[rank] = True
    return hits


def precision_envelope_area(recalls: Sequence[Fraction], precisions: Sequence[Fraction]) -> Fraction:
    """All-point interpolated area for operating points sorted by recall."""
    area = Fraction(0)
    previous = Fraction(0)
    for k, recall in enumerate(recalls):
        envelope = max(precisions[k:])
        area += (recall - previous) * envelope
        previous = recall
    return area


def class_average_precision(
    detections: Sequence[ScoredBox],
    ground_truths: Sequence[GroundTruthBox],
    iou_threshold: float = 0.5,
) -> float:
    """AP of one class; the number of ground truths must be positive."""
    n_gt = len(ground_truths)
    if n_gt == 0:
        raise ContractError("AP is undefined for a class without ground truths")
    if not detections:
        return 0.0
    hits = match_detections(detections, ground_truths, iou_threshold)
    scores = sorted((d.score for d in detections), reverse=True)
    recalls, precisions = [], []
    tp = 0
    for rank, hit in enumerate(hits):
        tp += int(hit)
        last_of_tie = rank + 1 == len(scores) or scores[rank + 1] != scores[rank]
        if last_of_tie:
            recalls.append(Fraction(tp, n_gt))
            precisions.append(Fraction(tp, rank + 1))
    return float(precision_envelope_area(recalls, precisions))


def average_precision(
    detections: Iterable[ScoredBox],
    ground_truths: Iterable[GroundTruthBox],
    iou_threshold: float = 0.5,
) -> Dict[str, float]:
    """AP per class id; classes without ground truths are left out with a warning."""
    by_class_det: Dict[str, List[ScoredBox]] = defaultdict(list)
    by_class_gt: Dict[str, List[GroundTruthBox]] = defaultdict(list)
    for d in detections:
        by_class_det[d.class_id].append(d)
    for g in ground_truths:
        by_class_gt[g.class_id].append(g)
    result = {}
    for class_id in sorted(set(by_class_det) | set(by_class_gt)):
        if not by_class_gt.get(class_id):
            logger.warning(f"Class {class_id} has no ground truths; excluded from mAP")
            continue
        result[class_id] = class_average_precision(by_class_det.get(class_id, []), by_class_gt[class_id], iou_threshold)
    return result


def mean_ap(ap_per_class: Dict[str, float]) -> MetricValue:
    """Unweighted mean over classes."""
    if not ap_per_class:
        logger.warning("mAP is undefined (no class has ground truths)")
        return UNDEFINED
    return float(np.mean([ap_per_class[c] for c in sorted(ap_per_class)]))


@dataclass(frozen=True)
class BoxplotStats:
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float

    def to_dict(self) -> Dict[str, float]:
        return {"min": self.minimum, "q1": self.q1, "median": self.median, "q3": self.q3, "max": self.maximum}


def iou_quartiles(ious: Sequence[float]) -> BoxplotStats:
    """Five-number summary; quartiles by linear interpolation between closest ranks.

    Raises:
        ContractError: If the sample is empty
    """
    values = np.asarray(ious, dtype=np.float64).ravel()
    if values.size == 0:
        raise ContractError("IoU quartiles need a non-empty sample")
    q = np.quantile(values, [0.0, 0.25, 0.5, 0.75, 1.0])
    return BoxplotStats(*(float(v) for v in q))


# -- summaries --------------------------------------------------------------


@dataclass
class ClassificationMetrics:
    counts: ConfusionCounts
    auc: MetricValue = UNDEFINED

    @classmethod
    def from_predictions(
        cls, pred_flags: Sequence[int], true_flags: Sequence[int], scores: Optional[Sequence[float]] = None
    ) -> "ClassificationMetrics":
        counts = confusion(pred_flags, true_flags)
        auc: MetricValue = UNDEFINED
        if scores is not None and 0 < counts.tp + counts.fn < counts.total:
            auc, _ = roc_auc(scores, true_flags)
        elif scores is not None:
            logger.warning("AUC is undefined (labels hold a single class)")
        return cls(counts=counts, auc=auc)

    def to_dict(self) -> Dict:
        c = self.counts
        return {
            "counts": c.to_dict(),
            "acc": to_json_value(acc(c)),
            "spec": to_json_value(spec(c)),
            "sen": to_json_value(sen(c)),
            "prec": to_json_value(prec(c)),
            "f1": to_json_value(f1(c)),
            "auc": to_json_value(self.auc),
        }


@dataclass
class SectionMetrics:
    section: str
    n_images: int
    ap: Dict[str, float]
    plane: ClassificationMetrics
    structures: Dict[str, ClassificationMetrics] = field(default_factory=dict)
    iou: Optional[BoxplotStats] = None
    iou_sample: List[float] = field(default_factory=list)

    @property
    def map(self) -> MetricValue:
        return mean_ap(self.ap)

    def to_dict(self) -> Dict:
        return {
            "n_images": self.n_images,
            "ap": {k: float(v) for k, v in sorted(self.ap.items())},
            "map": to_json_value(self.map),
            "plane": self.plane.to_dict(),
            "structures": {k: v.to_dict() for k, v in sorted(self.structures.items())},
            "iou_quartiles": self.iou.to_dict() if self.iou else None,
        }


@dataclass
class MetricSummary:
    """Everything ``eval`` reports except wall-clock timing."""

    sections: Dict[str, SectionMetrics]
    settings: Dict = field(default_factory=dict)
    parameters: Dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "settings": dict(sorted(self.settings.items())),
            "parameters": dict(sorted(self.parameters.items())),
            "sections": {name: m.to_dict() for name, m in sorted(self.sections.items())},
        }

    def ap_table(self) -> pd.DataFrame:
        rows = []
        for name, m in sorted(self.sections.items()):
            row = {"section": name}
            row.update({k: float(v) for k, v in sorted(m.ap.items())})
            row["mAP"] = to_json_value(m.map)
            rows.append(row)
        return pd.DataFrame(rows)

    def classification_table(self) -> pd.DataFrame:
        rows = []
        for name, m in sorted(self.sections.items()):
            c = m.plane.counts
            rows.append(
                {
                    "section": name,
                    "Prec": to_json_value(prec(c)),
                    "Sen": to_json_value(sen(c)),
                    "ACC": to_json_value(acc(c)),
                    "F1": to_json_value(f1(c)),
                    "Spec": to_json_value(spec(c)),
                    "AUC": to_json_value(m.plane.auc),
                }
            )
        return pd.DataFrame(rows)
