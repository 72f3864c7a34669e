"""
Class Prediction Network

Per-ROI structure classification with a separate standard/non-standard
quality flag, trained with focal loss.

The structure registry is shared by every section: index 0 is background and
the essential structures of each section follow in a fixed order, so class
ids are stable across runs and checkpoints. When the section of an image is
known, the class head is restricted to that section's structures.
"""

import math
from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from models.checkpoint import ParameterSet
from models.errors import ConfigError, ParameterError
from models.tensor import Tensor, clamp_min, log, matmul, power, sigmoid, softmax

BACKGROUND = "BG"
PROBABILITY_FLOOR = 1e-7
MASKED_LOGIT = -1.0e4

# Essential structures per section. The abdominal list uses the four classes
# (ST, UV, SP, AO); "stomach bubble" and "stomach" are one structure here.
SECTION_STRUCTURES: "OrderedDict[str, Tuple[str, ...]]" = OrderedDict(
    [
        ("head", ("CSP", "T", "TV", "BM", "LS", "CP")),
        ("abdominal", ("ST", "UV", "SP", "AO")),
        ("heart", ("LV", "LA", "RV", "RA", "DAO")),
    ]
)

STRUCTURE_NAMES = {
    "CSP": "cavum septi pellucidi",
    "T": "thalamus",
    "TV": "third ventricle",
    "BM": "brain midline",
    "LS": "lateral sulcus",
    "CP": "choroid plexus",
    "ST": "stomach",
    "UV": "umbilical vein",
    "SP": "spine",
    "AO": "aorta",
    "LV": "left ventricle",
    "LA": "left atrium",
    "RV": "right ventricle",
    "RA": "right atrium",
    "DAO": "descending aorta",
}


@dataclass(frozen=True)
class StructureClass:
    section: str
    structure_id: str
    index: int

    @property
    def name(self) -> str:
        return STRUCTURE_NAMES.get(self.structure_id, "background")


class StructureRegistry:
    """Joint class list: background first, then every section's structures."""

    def __init__(self, sections: Sequence[str] = tuple(SECTION_STRUCTURES)):
        unknown = [s for s in sections if s not in SECTION_STRUCTURES]
        if unknown:
            raise ConfigError(f"Unknown section(s): {unknown}")
        self.sections = list(SECTION_STRUCTURES)
        self.classes: List[StructureClass] = [StructureClass("", BACKGROUND, 0)]
        for section, structures in SECTION_STRUCTURES.items():
            for structure_id in structures:
                self.classes.append(StructureClass(section, structure_id, len(self.classes)))
        self._by_id = {c.structure_id: c for c in self.classes}

    @property
    def num_classes(self) -> int:
        """Number of outputs of the class head, background included."""
        return len(self.classes)

    def index_of(self, structure_id: str) -> int:
        try:
            return self._by_id[structure_id].index
        except KeyError:
            raise ConfigError(f"Unknown structure id: {structure_id}") from None

    def structure(self, index: int) -> StructureClass:
        return self.classes[index]

    def section_of(self, structure_id: str) -> str:
        return self._by_id[structure_id].section if structure_id in self._by_id else ""

    def essential(self, section: str) -> Tuple[str, ...]:
        if section not in SECTION_STRUCTURES:
            raise ConfigError(f"Unknown section: {section}")
        return SECTION_STRUCTURES[section]

    def section_indices(self, section: str) -> np.ndarray:
        return np.array([self.index_of(s) for s in self.essential(section)], dtype=int)

    def logit_mask(self, section: Optional[str]) -> Optional[np.ndarray]:
        """Additive mask leaving background and ``section``'s classes open."""
        if section is None:
            return None
        mask = np.full(self.num_classes, MASKED_LOGIT)
        mask[0] = 0.0
        mask[self.section_indices(section)] = 0.0
        return mask


REGISTRY = StructureRegistry()


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 2.0

    def __post_init__(self):
        if self.gamma < 0:
            raise ParameterError(f"Focal gamma must be non-negative, got {self.gamma}")


@dataclass
class ClassPrediction:
    class_probs: np.ndarray
    quality: float

    @property
    def class_index(self) -> int:
        return int(np.argmax(self.class_probs))


@dataclass
class CpnParams:
    class_weight: Tensor  # [K+1, d]
    class_bias: Tensor  # [K+1]
    quality_weight: Tensor  # [d]
    quality_bias: Tensor  # [1]


def p_t(p: float, y: int) -> float:
    """Probability assigned to the true outcome."""
    if not 0 <= p <= 1:
        raise ParameterError(f"Probability must lie in [0, 1], got {p}")
    return p if y == 1 else 1 - p


def focal_loss(pt: float, gamma: float = 2.0) -> float:
    """−(1 − p_t)^γ · ln(max(p_t, 1e-7))."""
    gamma = FocalParams(gamma).gamma
    if not 0 <= pt <= 1:
        raise ParameterError(f"p_t must lie in [0, 1], got {pt}")
    return -((1 - pt) ** gamma) * math.log(max(pt, PROBABILITY_FLOOR))


def focal_loss_tensor(pt: Tensor, gamma: float = 2.0) -> Tensor:
    """Elementwise focal loss of a tensor of p_t values."""
    gamma = FocalParams(gamma).gamma
    log_pt = log(clamp_min(pt, PROBABILITY_FLOOR))
    if gamma == 0:
        return -log_pt
    return -(power(1.0 - pt, gamma) * log_pt)


def binary_p_t(probs: Tensor, targets: np.ndarray) -> Tensor:
    """p where the target is 1, 1 − p where it is 0."""
    targets = np.asarray(targets, dtype=probs.dtype)
    return probs * targets + (1.0 - probs) * (1.0 - targets)


def classify(roi_feature, params: CpnParams, section_mask: Optional[np.ndarray] = None) -> ClassPrediction:
    """Class distribution and quality probability for one ROI feature vector.

    Raises:
        ConfigError: If the feature length does not match the heads
    """
    feature = roi_feature if isinstance(roi_feature, Tensor) else Tensor(roi_feature, dtype=params.class_weight.dtype)
    probs, quality = cpn_forward(feature.reshape(1, -1), params, section_mask)
    return ClassPrediction(class_probs=probs.values[0].astype(np.float64), quality=float(quality.values[0]))


def cpn_forward(
    features: Tensor, params: CpnParams, section_mask: Optional[np.ndarray] = None
) -> Tuple[Tensor, Tensor]:
    """Batched heads over [N, d] features: class probabilities [N, K+1], quality [N]."""
    expected = params.class_weight.shape[1]
    if features.ndim != 2 or features.shape[1] != expected:
        raise ConfigError(f"ROI feature size {features.shape[-1]} does not match the CPN input size {expected}")
    logits = matmul(features, params.class_weight.T) + params.class_bias
    if section_mask is not None:
        logits = logits + section_mask.astype(logits.dtype)
    probs = softmax(logits, axis=1)
    quality = sigmoid(matmul(features, params.quality_weight) + params.quality_bias)
    return probs, quality


class ClassPredictionNetwork:
    """Softmax structure head and sigmoid quality head (names prefixed ``cpn.``)."""

    def __init__(
        self,
        input_size: int,
        parameters: ParameterSet,
        rng: np.random.Generator,
        registry: StructureRegistry = REGISTRY,
    ):
        self.registry = registry
        self.parameters = parameters
        classes = registry.num_classes
        limit = np.sqrt(6.0 / (input_size + classes))
        q_limit = np.sqrt(6.0 / (input_size + 1))
        self.params = CpnParams(
            class_weight=parameters.add("cpn.class.weight", rng.uniform(-limit, limit, size=(classes, input_size))),
            class_bias=parameters.add("cpn.class.bias", np.zeros(classes)),
            quality_weight=parameters.add("cpn.quality.weight", rng.uniform(-q_limit, q_limit, size=input_size)),
            quality_bias=parameters.add("cpn.quality.bias", np.zeros(1)),
        )

    def parameter_count(self) -> int:
        return self.parameters.count("cpn.")

    def __call__(self, features: Tensor, section: Optional[str] = None) -> Tuple[Tensor, Tensor]:
        return cpn_forward(features, self.params, self.registry.logit_mask(section))
