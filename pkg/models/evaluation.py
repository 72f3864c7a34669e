"""
Model Evaluation

Runs a trained network over a dataset split and gathers detection and
classification indicators per section:

- AP per structure class and mAP (IoU > 0.5 matching)
- IoU of the top detection for every ground-truth structure, as quartiles
- plane-level ACC/Spec/Sen/Prec/F1 and AUC (standard = positive)
- the same indicators for every structure's quality flag

Writes ``metrics.json`` (deterministic), ``timing.json``, ``ap_table.csv``,
``classification_table.csv`` and ``iou_boxplot.png``.

Example:
    >>> from models.evaluation import Evaluator
    >>> summary, timing = Evaluator(net).evaluate(dataset.split("test"))
    >>> summary.sections["head"].map
"""

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from loguru import logger  # noqa: E402
from tqdm import tqdm  # noqa: E402

from data.dataset import STANDARD, PhantomSample, write_json  # noqa: E402
from models.assessment import QualityAssessor, QualityReport, best_detections  # noqa: E402
from models.config import RunConfig  # noqa: E402
from models.detector import iou  # noqa: E402
from models.metrics import (  # noqa: E402
    ClassificationMetrics,
    GroundTruthBox,
    MetricSummary,
    ScoredBox,
    SectionMetrics,
    average_precision,
    iou_quartiles,
    is_defined,
)
from models.network import DetectionResult, QualityNet  # noqa: E402


@dataclass
class Prediction:
    sample: PhantomSample
    result: DetectionResult
    report: QualityReport


@dataclass
class TimingSummary:
    seconds: List[float] = field(default_factory=list)

    def to_dict(self) -> Dict:
        values = np.asarray(self.seconds, dtype=np.float64)
        return {
            "frames": int(values.size),
            "mean_s": float(values.mean()) if values.size else None,
            "max_s": float(values.max()) if values.size else None,
            "total_s": float(values.sum()),
        }


def plane_score(report: QualityReport, result: DetectionResult) -> float:
    """Lowest quality probability over the essential structures (0 if any is missing)."""
    best = best_detections(result.detections)
    scores = []
    for s in report.structures:
        d = best.get(s.structure_id)
        scores.append(d.quality if d is not None else 0.0)
    return float(min(scores)) if scores else 0.0


def section_metrics(section: str, predictions: Sequence[Prediction], iou_threshold: float = 0.5) -> SectionMetrics:
    """Indicators for the predictions of one section."""
    detections, ground_truths, ious = [], [], []
    true_plane, pred_plane, plane_scores = [], [], []
    structure_truth: Dict[str, List[int]] = defaultdict(list)
    structure_pred: Dict[str, List[int]] = defaultdict(list)
    structure_score: Dict[str, List[float]] = defaultdict(list)

    for p in predictions:
        image_id = p.sample.name
        for d in p.result.detections:
            detections.append(ScoredBox(image_id, d.structure_id, tuple(d.box), d.confidence))
        best = best_detections(p.result.detections)
        annotated = {a.structure_id: a for a in p.sample.annotations}
        for a in p.sample.annotations:
            ground_truths.append(GroundTruthBox(image_id, a.structure_id, a.box))
            if a.structure_id in best:
                ious.append(iou(best[a.structure_id].box, a.box))

        true_plane.append(int(p.sample.plane_label == STANDARD))
        pred_plane.append(int(p.report.verdict == STANDARD))
        plane_scores.append(plane_score(p.report, p.result))
        for s in p.report.structures:
            a = annotated.get(s.structure_id)
            structure_truth[s.structure_id].append(int(a is not None and a.flag == 1))
            structure_pred[s.structure_id].append(int(s.flag))
            d = best.get(s.structure_id)
            structure_score[s.structure_id].append(d.quality if d is not None else 0.0)

    ap = average_precision(detections, ground_truths, iou_threshold)
    structures = {
        sid: ClassificationMetrics.from_predictions(structure_pred[sid], structure_truth[sid], structure_score[sid])
        for sid in structure_truth
    }
    return SectionMetrics(
        section=section,
        n_images=len(predictions),
        ap=ap,
        plane=ClassificationMetrics.from_predictions(pred_plane, true_plane, plane_scores),
        structures=structures,
        iou=iou_quartiles(ious) if ious else None,
        iou_sample=[float(v) for v in ious],
    )


class Evaluator:
    """Evaluate a network on labelled samples.

    Attributes:
        assessor: Preprocessing, detection and per-structure verdicts
        config: Run configuration (IoU threshold, box-plot switch)
    """

    def __init__(self, net: QualityNet, config: Optional[RunConfig] = None):
        self.config = config or net.config
        self.assessor = QualityAssessor(net, self.config)

    @property
    def net(self) -> QualityNet:
        return self.assessor.net

    def predict(self, samples: Sequence[PhantomSample]) -> List[Prediction]:
        predictions = []
        for sample in tqdm(samples, desc="evaluate", disable=None):
            report, result = self.assessor.run(sample.image, sample.section)
            predictions.append(Prediction(sample, result, report))
        return predictions

    def summarize(self, predictions: Sequence[Prediction]) -> Tuple[MetricSummary, TimingSummary]:
        by_section: Dict[str, List[Prediction]] = defaultdict(list)
        for p in predictions:
            by_section[p.sample.section].append(p)
        threshold = self.config.evaluation.iou_threshold
        sections = {name: section_metrics(name, preds, threshold) for name, preds in sorted(by_section.items())}
        summary = MetricSummary(
            sections=sections,
            settings={
                "iou_threshold": threshold,
                "quality_cutoff": self.config.classifier.quality_cutoff,
                "relation_enabled": self.config.relation.enabled,
                "use_spp": self.config.backbone.use_spp,
            },
            parameters=self.net.parameter_report(),
        )
        timing = TimingSummary([p.report.timing_s for p in predictions])
        return summary, timing

    def evaluate(self, samples: Sequence[PhantomSample]) -> Tuple[MetricSummary, TimingSummary]:
        logger.info(f"Evaluating {len(samples)} samples...")
        summary, timing = self.summarize(self.predict(samples))
        for name, m in summary.sections.items():
            shown = f"{m.map:.4f}" if is_defined(m.map) else "undefined"
            logger.info(f"{name}: mAP={shown} over {m.n_images} images")
        return summary, timing


def validation_scores(summary: MetricSummary) -> Tuple[Optional[float], Optional[float]]:
    """(mean of the defined section mAPs, plane ACC pooled over sections)."""
    maps = [m.map for m in summary.sections.values() if is_defined(m.map)]
    correct = sum(m.plane.counts.tp + m.plane.counts.tn for m in summary.sections.values())
    total = sum(m.plane.counts.total for m in summary.sections.values())
    return (float(np.mean(maps)) if maps else None, correct / total if total else None)


def plot_iou_boxplot(summary: MetricSummary, path: Union[str, Path]):
    """One box per section; whiskers span the full range."""
    names = [n for n, m in sorted(summary.sections.items()) if m.iou_sample]
    fig, ax = plt.subplots(figsize=(6, 4))
    if names:
        ax.boxplot([summary.sections[n].iou_sample for n in names], whis=(0, 100))
        ax.set_xticks(range(1, len(names) + 1))
        ax.set_xticklabels(names)
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.set_title("IoU of detected structures")
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def write_evaluation(
    summary: MetricSummary,
    timing: TimingSummary,
    out_dir: Union[str, Path],
    boxplot: bool = True,
) -> Dict[str, Path]:
    out_dir = Path(out_dir)
    paths = {
        "metrics": out_dir / "metrics.json",
        "timing": out_dir / "timing.json",
        "ap_table": out_dir / "ap_table.csv",
        "classification_table": out_dir / "classification_table.csv",
    }
    write_json(paths["metrics"], summary.to_dict())
    write_json(paths["timing"], timing.to_dict())
    summary.ap_table().to_csv(paths["ap_table"], index=False)
    summary.classification_table().to_csv(paths["classification_table"], index=False)
    if boxplot:
        paths["boxplot"] = out_dir / "iou_boxplot.png"
        plot_iou_boxplot(summary, paths["boxplot"])
    logger.info(f"Evaluation written to {out_dir}")
    return paths


def evaluate(
    net: QualityNet, samples: Sequence[PhantomSample], config: Optional[RunConfig] = None
) -> Tuple[MetricSummary, TimingSummary]:
    return Evaluator(net, config).evaluate(samples)
