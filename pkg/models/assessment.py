"""
Plane Quality Assessment

High-level API turning a trained checkpoint into per-structure '1'/'0'
assessments and a standard/non-standard verdict for an image, plus the
annotated overlay image.

Example:
    >>> from models.assessment import QualityAssessor
    >>> assessor = QualityAssessor.from_checkpoint("runs/exp1/checkpoint.joblib")
    >>> report = assessor.assess(read_image("images/head_0000.png"), section="head")
    >>> report.verdict
    'standard'
"""

import math
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from PIL import Image, ImageDraw

from data.dataset import NON_STANDARD, STANDARD, read_json, write_json
from data.image_io import GrayImage
from data.preprocess import ImagePreprocessor
from models.checkpoint import load_checkpoint
from models.classifier import REGISTRY, StructureRegistry
from models.config import ReportConfig, RunConfig
from models.errors import ConfigError, DataError
from models.network import Detection, DetectionResult, QualityNet

SCHEMA_VERSION = 1

FLAG_OK_LEVEL = 255
FLAG_BAD_LEVEL = 128


@dataclass(frozen=True)
class StructureAssessment:
    structure_id: str
    detected: bool
    box: Optional[Tuple[float, float, float, float]]
    flag: int
    confidence: float

    def to_dict(self) -> Dict:
        return {
            "id": self.structure_id,
            "detected": bool(self.detected),
            "box": [float(v) for v in self.box] if self.box is not None else None,
            "flag": int(self.flag),
            "confidence": float(self.confidence),
        }

    @classmethod
    def from_dict(cls, record: Dict) -> "StructureAssessment":
        box = record.get("box")
        return cls(
            structure_id=str(record["id"]),
            detected=bool(record["detected"]),
            box=tuple(float(v) for v in box) if box is not None else None,
            flag=int(record["flag"]),
            confidence=float(record["confidence"]),
        )


@dataclass(frozen=True)
class QualityReport:
    """Per-structure assessment and plane verdict of one image.

    Attributes:
        section: head, abdominal or heart
        structures: One entry per essential structure, in registry order
        verdict: standard iff every structure is detected with flag 1
        timing_s: Wall-clock seconds from preprocessing to verdict
    """

    section: str
    structures: Tuple[StructureAssessment, ...]
    verdict: str
    timing_s: float = 0.0

    def __post_init__(self):
        if self.timing_s < 0:
            raise ConfigError(f"Report timing must be non-negative, got {self.timing_s}")

    @property
    def flags(self) -> Dict[str, int]:
        return {s.structure_id: s.flag for s in self.structures}

    @property
    def failing(self) -> List[str]:
        """Structures flagged 0 (undetected or below the quality cutoff)."""
        return [s.structure_id for s in self.structures if s.flag == 0]

    def to_dict(self) -> Dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "section": self.section,
            "structures": [s.to_dict() for s in self.structures],
            "verdict": self.verdict,
            "timing_s": float(self.timing_s),
        }

    @classmethod
    def from_dict(cls, record: Dict) -> "QualityReport":
        version = record.get("schema_version")
        if version != SCHEMA_VERSION:
            raise DataError(f"Unsupported report schema version: {version}")
        return cls(
            section=str(record["section"]),
            structures=tuple(StructureAssessment.from_dict(r) for r in record["structures"]),
            verdict=str(record["verdict"]),
            timing_s=float(record["timing_s"]),
        )

    def save(self, path: Union[str, Path]):
        write_json(path, self.to_dict())

    @classmethod
    def load(cls, path: Union[str, Path]) -> "QualityReport":
        return cls.from_dict(read_json(path))


def verdict(flags: Dict[str, int], section: str, registry: StructureRegistry = REGISTRY) -> str:
    """Conjunction of the quality flags over the section's essential structures.

    Raises:
        ConfigError: If a flag names a structure outside the section, or a
            structure of the section has no flag
    """
    essential = registry.essential(section)
    unknown = sorted(set(flags) - set(essential))
    if unknown:
        raise ConfigError(f"Unknown structure id(s) for section {section}: {unknown}")
    missing = [s for s in essential if s not in flags]
    if missing:
        raise ConfigError(f"Flags do not cover section {section}: missing {missing}")
    return STANDARD if all(int(flags[s]) == 1 for s in essential) else NON_STANDARD


def best_detections(detections: Sequence[Detection]) -> Dict[str, Detection]:
    """Highest-confidence detection per structure class."""
    best: Dict[str, Detection] = {}
    for d in detections:
        current = best.get(d.structure_id)
        if current is None or d.confidence > current.confidence:
            best[d.structure_id] = d
    return best


def report_from_detections(
    section: str,
    detections: Sequence[Detection],
    timing_s: float = 0.0,
    registry: StructureRegistry = REGISTRY,
) -> QualityReport:
    best = best_detections(detections)
    structures = []
    for structure_id in registry.essential(section):
        d = best.get(structure_id)
        if d is None:
            structures.append(StructureAssessment(structure_id, False, None, 0, 0.0))
        else:
            structures.append(
                StructureAssessment(structure_id, True, tuple(float(v) for v in d.box), int(d.flag), d.confidence)
            )
    flags = {s.structure_id: s.flag for s in structures}
    return QualityReport(
        section=section,
        structures=tuple(structures),
        verdict=verdict(flags, section, registry),
        timing_s=timing_s,
    )


class QualityAssessor:
    """Checkpoint-backed plane assessment.

    Safe to share across threads: ``assess`` only reads the parameters.

    Attributes:
        net: Trained multi-task network
        preprocessor: Text removal and smoothing applied before detection
    """

    def __init__(self, net: QualityNet, config: Optional[RunConfig] = None):
        self.net = net
        self.config = config or net.config
        self.preprocessor = ImagePreprocessor.from_config(self.config.preprocess)
        logger.info(f"Quality assessor initialized for sections {net.sections}")

    @classmethod
    def from_checkpoint(cls, path: Union[str, Path]) -> "QualityAssessor":
        return cls(QualityNet.from_checkpoint(load_checkpoint(path)))

    def run(self, image: GrayImage, section: str) -> Tuple[QualityReport, DetectionResult]:
        """Report together with the raw detections it was derived from.

        Raises:
            ConfigError: If the checkpoint does not cover ``section``
        """
        self.net.check_section(section)
        start = time.perf_counter()
        result = self.net.detect(self.preprocessor.process(image), section)
        elapsed = time.perf_counter() - start
        report = report_from_detections(section, result.detections, elapsed, self.net.registry)
        return report, result

    def assess(self, image: GrayImage, section: str) -> QualityReport:
        report, _ = self.run(image, section)
        logger.info(
            f"Assessed {section} plane in {report.timing_s:.3f}s: {report.verdict}"
            + (f" (flag 0: {', '.join(report.failing)})" if report.failing else "")
        )
        return report


def assess(model: Union[QualityNet, QualityAssessor], image: GrayImage, section: str) -> QualityReport:
    assessor = model if isinstance(model, QualityAssessor) else QualityAssessor(model)
    return assessor.assess(image, section)


def batch_assess(
    assessor: QualityAssessor,
    images: Sequence[GrayImage],
    sections: Sequence[str],
    n_jobs: int = 1,
) -> List[QualityReport]:
    """Assess several images in parallel threads against one checkpoint."""
    if len(images) != len(sections):
        raise ConfigError(f"{len(images)} images but {len(sections)} sections")
    logger.info(f"Batch assessing {len(images)} images with {n_jobs} parallel jobs")
    return Parallel(n_jobs=n_jobs, prefer="threads")(
        delayed(assessor.assess)(image, section) for image, section in zip(images, sections)
    )


def pixel_rectangle(box: Sequence[float], width: int, height: int) -> Tuple[int, int, int, int]:
    """Inclusive pixel corners covering a box given in pixel-edge coordinates."""
    x0 = min(max(int(math.floor(box[0])), 0), width - 1)
    y0 = min(max(int(math.floor(box[1])), 0), height - 1)
    x1 = min(max(int(math.ceil(box[2])) - 1, x0), width - 1)
    y1 = min(max(int(math.ceil(box[3])) - 1, y0), height - 1)
    return x0, y0, x1, y1


def annotate(image: GrayImage, report: QualityReport, config: ReportConfig = ReportConfig()) -> GrayImage:
    """Draw detected boxes with "<id>:<flag>" labels and a verdict banner.

    Boxes with flag 1 are drawn white, flag 0 gray. The banner fills the
    bottom ``banner_height`` rows: white for standard, black otherwise.
    """
    canvas = Image.fromarray(image.to_uint8())
    draw = ImageDraw.Draw(canvas)
    width, height = canvas.size
    for s in report.structures:
        if not s.detected or s.box is None:
            continue
        level = FLAG_OK_LEVEL if s.flag == 1 else FLAG_BAD_LEVEL
        x0, y0, x1, y1 = pixel_rectangle(s.box, width, height)
        draw.rectangle([x0, y0, x1, y1], outline=level)
        draw.text((x0 + 2, y0 + 2), f"{s.structure_id}:{s.flag}", fill=level)

    band = min(max(config.banner_height, 0), height)
    if band:
        standard = report.verdict == STANDARD
        draw.rectangle([0, height - band, width - 1, height - 1], fill=255 if standard else 0)
        draw.text((2, height - band), "STANDARD" if standard else "NON-STANDARD", fill=0 if standard else 255)
    return GrayImage(np.asarray(canvas, dtype=np.float64) / 255.0)
