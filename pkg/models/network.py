"""
Multi-Task Quality Network

Wires the feature extraction network, the FPN region proposal network, the
ROI appearance projection, the relation module and the class prediction
network into one model sharing a single parameter store.

Example:
    >>> from models.network import QualityNet
    >>> net = QualityNet(load_config(), seed=42)
    >>> detections = net.detect(image, section="head")
"""

import math
import threading
import time
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from data.image_io import GrayImage
from models.backbone import FeatureExtractor, build_fen, global_avg_pool, spp, spp_length
from models.checkpoint import ParameterSet, parameter_state
from models.classifier import REGISTRY, ClassPredictionNetwork, StructureRegistry
from models.config import RunConfig, config_from_dict
from models.detector import (
    AnchorSet,
    Proposal,
    RegionProposalNetwork,
    RpnOutput,
    generate_anchors,
    nms,
    propose,
)
from models.errors import ConfigError
from models.relation import RelationModule
from models.tensor import Tensor, concat, matmul, relu, stack

SUBNETWORKS = {"fen": "FEN", "rpn": "RPN", "roi": "ROI projection", "relation": "Relation", "cpn": "CPN"}


@dataclass
class Detection:
    """One localized, classified structure."""

    box: np.ndarray
    structure_id: str
    class_index: int
    confidence: float
    quality: float
    flag: int
    level: int
    objectness: float

    def to_dict(self) -> Dict:
        return {
            "box": [float(v) for v in self.box],
            "class": self.structure_id,
            "confidence": float(self.confidence),
            "quality": float(self.quality),
            "flag": int(self.flag),
            "level": int(self.level),
            "score": float(self.objectness),
        }


@dataclass
class ForwardPass:
    maps: Dict[str, Tensor]
    pyramid: Dict[int, Tensor]
    rpn: RpnOutput
    anchors: AnchorSet
    image_size: Tuple[int, int]  # (width, height)


@dataclass
class DetectionResult:
    detections: List[Detection]
    proposals: List[Proposal]
    seconds: float = 0.0
    relation_weights: List[Tensor] = field(default_factory=list)


class RoiFeatureHead:
    """Fixed-length ROI descriptors projected to the appearance dimension.

    Each ROI is cropped from the pyramid level whose anchor size is closest
    (log scale) to sqrt(ROI area), pooled by SPP (or GAP when SPP is off),
    optionally extended with GAP(C5), then projected by a ReLU layer.
    """

    def __init__(self, config: RunConfig, c5_channels: int, parameters: ParameterSet, rng: np.random.Generator):
        self.config = config
        self.parameters = parameters
        width = config.detector.fpn_channels
        pooled = spp_length(width, config.classifier.roi_spp_levels) if config.backbone.use_spp else width
        self.context_size = c5_channels if config.classifier.use_global_context else 0
        self.input_size = pooled + self.context_size
        d_f = config.relation.d_f
        limit = np.sqrt(6.0 / (self.input_size + d_f))
        self.weight = parameters.add("roi.weight", rng.uniform(-limit, limit, size=(d_f, self.input_size)))
        self.bias = parameters.add("roi.bias", np.zeros(d_f))
        self._log_sizes = np.log(np.asarray(config.detector.sizes, dtype=np.float64))

    def route(self, boxes: np.ndarray) -> np.ndarray:
        """Pyramid level for every ROI (xyxy rows)."""
        side = np.sqrt(np.maximum((boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1]), 1e-12))
        nearest = np.abs(np.log(side)[:, None] - self._log_sizes[None, :]).argmin(axis=1)
        return np.asarray(self.config.detector.pyramid_levels)[nearest]

    def crop(self, feature_map: Tensor, box: np.ndarray, stride: int) -> Tensor:
        _, height, width = feature_map.shape
        x0 = min(int(math.floor(box[0] / stride)), width - 1)
        y0 = min(int(math.floor(box[1] / stride)), height - 1)
        x1 = min(max(int(math.ceil(box[2] / stride)), x0 + 1), width)
        y1 = min(max(int(math.ceil(box[3] / stride)), y0 + 1), height)
        return feature_map[:, max(y0, 0): y1, max(x0, 0): x1]

    def __call__(self, forward: ForwardPass, boxes: np.ndarray) -> Tensor:
        strides = dict(zip(self.config.detector.pyramid_levels, self.config.detector.strides))
        context = global_avg_pool(forward.maps["C5"]) if self.context_size else None
        descriptors = []
        for box, level in zip(boxes, self.route(boxes)):
            crop = self.crop(forward.pyramid[int(level)], box, strides[int(level)])
            if self.config.backbone.use_spp:
                pooled = spp(crop, self.config.classifier.roi_spp_levels)
            else:
                pooled = global_avg_pool(crop)
            descriptors.append(concat([pooled, context]) if context is not None else pooled)
        features = stack(descriptors, axis=0)
        return relu(matmul(features, self.weight.T) + self.bias)


class QualityNet:
    """FEN → FPN/RPN → ROI features → relation module → CPN.

    Attributes:
        config: Resolved run configuration
        parameters: Single parameter store shared by all sub-networks
        sections: Sections the model was trained on
    """

    def __init__(
        self,
        config: RunConfig,
        seed: Optional[int] = None,
        sections: Sequence[str] = ("head", "abdominal", "heart"),
        registry: StructureRegistry = REGISTRY,
    ):
        self.config = config
        self.seed = config.random_seed if seed is None else seed
        self.sections = list(sections)
        self.registry = registry
        for section in self.sections:
            registry.essential(section)
        self.parameters = ParameterSet(dtype=config.backbone.dtype)
        rng = np.random.default_rng(self.seed)
        self.fen: FeatureExtractor = build_fen(config.backbone, parameters=self.parameters, rng=rng)
        self.rpn = RegionProposalNetwork(config.detector, self.fen.channels, self.parameters, rng)
        self.roi_head = RoiFeatureHead(config, self.fen.channels[-1], self.parameters, rng)
        self.relation = RelationModule(config.relation, self.parameters, rng)
        self.cpn = ClassPredictionNetwork(config.relation.d_f, self.parameters, rng, registry)
        self._anchor_cache: Dict[Tuple[int, int], AnchorSet] = {}
        self._anchor_lock = threading.Lock()
        logger.info(f"QualityNet initialized with {self.parameters.count():,} parameters")

    # -- construction ------------------------------------------------------

    @classmethod
    def from_checkpoint(cls, payload: Dict) -> "QualityNet":
        """Rebuild the network recorded in a loaded checkpoint payload."""
        config = config_from_dict(payload["config"])
        net = cls(config, sections=payload["sections"])
        net.parameters.load_state(parameter_state(payload))
        return net

    def parameter_report(self) -> Dict[str, int]:
        counts = self.parameters.count_by_group()
        report = {SUBNETWORKS.get(group, group): count for group, count in counts.items()}
        report["total"] = self.parameters.count()
        return report

    def check_section(self, section: str):
        if section not in self.sections:
            raise ConfigError(
                f"Section '{section}' is not covered by this checkpoint (trained on {self.sections})"
            )

    # -- forward -----------------------------------------------------------

    def anchors(self, width: int, height: int) -> AnchorSet:
        key = (width, height)
        with self._anchor_lock:
            if key not in self._anchor_cache:
                self._anchor_cache[key] = generate_anchors(width, height, self.config.detector)
            return self._anchor_cache[key]

    def forward(self, image) -> ForwardPass:
        """Backbone, pyramid and RPN head for one image."""
        x = self.fen.as_input(image)
        height, width = x.shape[1:]
        maps = self.fen.extract(x)
        pyramid = self.rpn.pyramid(maps)
        self.rpn.check_pyramid(pyramid, width, height)
        return ForwardPass(
            maps=maps,
            pyramid=pyramid,
            rpn=self.rpn.head(pyramid),
            anchors=self.anchors(width, height),
            image_size=(width, height),
        )

    def propose(self, forward: ForwardPass, top_k: Optional[int] = None) -> List[Proposal]:
        width, height = forward.image_size
        return propose(forward.rpn, forward.anchors, self.config.detector, width, height, top_k)

    def classify_rois(
        self,
        forward: ForwardPass,
        boxes: np.ndarray,
        section: Optional[str],
        weights_out: Optional[list] = None,
    ) -> Tuple[Tensor, Tensor]:
        """Class probabilities [N, K+1] and quality probabilities [N] for ROIs."""
        appearance = self.roi_head(forward, boxes)
        fused = self.relation(appearance, boxes, weights_out)
        return self.cpn(fused, section)

    def detect(self, image, section: str) -> DetectionResult:
        """Localized, classified, quality-flagged structures of one image.

        ROIs whose most probable class is background are dropped; the rest
        are suppressed per class with ``classifier.detection_nms_iou``.
        """
        self.check_section(section)
        start = time.perf_counter()
        forward = self.forward(image)
        proposals = self.propose(forward)
        if not proposals:
            return DetectionResult([], [], time.perf_counter() - start)
        boxes = np.stack([p.box for p in proposals])
        weights: List[Tensor] = []
        probs, quality = self.classify_rois(forward, boxes, section, weights)
        probs = probs.values.astype(np.float64)
        quality = quality.values.astype(np.float64)
        cutoff = self.config.classifier.quality_cutoff

        candidates: List[Detection] = []
        section_indices = self.registry.section_indices(section)
        for i, proposal in enumerate(proposals):
            best = int(section_indices[np.argmax(probs[i, section_indices])])
            if probs[i, best] <= probs[i, 0]:
                continue
            candidates.append(
                Detection(
                    box=proposal.box,
                    structure_id=self.registry.structure(best).structure_id,
                    class_index=best,
                    confidence=float(probs[i, best]),
                    quality=float(quality[i]),
                    flag=int(quality[i] >= cutoff),
                    level=proposal.level,
                    objectness=proposal.score,
                )
            )
        detections = []
        for index in sorted({d.class_index for d in candidates}):
            group = [d for d in candidates if d.class_index == index]
            keep = nms(
                np.stack([d.box for d in group]),
                np.array([d.confidence for d in group]),
                self.config.classifier.detection_nms_iou,
            )
            detections.extend(group[k] for k in keep)
        detections.sort(key=lambda d: (-d.confidence, d.class_index))
        return DetectionResult(detections, proposals, time.perf_counter() - start, weights)
