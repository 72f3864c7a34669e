"""
Region Proposal Network with FPN Anchors

Box geometry (IoU, center/log-size regression coding), anchor generation over
pyramid levels P3..P7, positive/negative anchor assignment, greedy NMS, and
the FPN + shared convolutional RPN head that scores every anchor.

Anchors are ordered level → row → column → aspect ratio; the head's
outputs use the same order so index i always refers to the same anchor.

Example:
    >>> from models.detector import generate_anchors, iou
    >>> anchors = generate_anchors(256, 256, DetectorConfig())
    >>> len(anchors)
    4092
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.special import expit

from models.checkpoint import ParameterSet
from models.config import DetectorConfig
from models.errors import ConfigError, DataError, NumericalError, ParameterError
from models.tensor import Tensor, add, concat, conv2d, relu, upsample_nearest

# Upper bound on decoded log size ratios for proposals (exp ≈ 62.5×)
MAX_LOG_RATIO = math.log(1000.0 / 16)


@dataclass(frozen=True)
class Box:
    """Axis-aligned box in pixels."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ParameterError(f"Invalid box: {self.as_list()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_list(self) -> List[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    def as_array(self) -> np.ndarray:
        return np.array(self.as_list(), dtype=np.float64)

    @classmethod
    def from_array(cls, values: Sequence[float]) -> "Box":
        return cls(*(float(v) for v in values))


@dataclass(frozen=True)
class BoxDelta:
    dx: float
    dy: float
    dw: float
    dh: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh])


@dataclass
class AnchorSet:
    boxes: np.ndarray  # [A, 4] xyxy
    levels: np.ndarray  # [A] pyramid level of each anchor

    def __len__(self) -> int:
        return len(self.boxes)


@dataclass
class AnchorAssignment:
    """Per-anchor assignment; arrays are indexed by anchor.

    Attributes:
        labels: 1 positive, 0 negative
        matched: Ground-truth index for positives, -1 otherwise
        max_iou: Highest IoU over all ground truths (0 when there are none)
        forced: True for positives added by best-anchor matching
    """

    labels: np.ndarray
    matched: np.ndarray
    max_iou: np.ndarray
    forced: np.ndarray

    @property
    def positives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 1)

    @property
    def negatives(self) -> np.ndarray:
        return np.flatnonzero(self.labels == 0)


@dataclass
class Proposal:
    box: np.ndarray
    level: int
    score: float
    anchor_index: int

    def to_dict(self) -> Dict:
        return {
            "box": [float(v) for v in self.box],
            "level": int(self.level),
            "score": float(self.score),
        }


# -- geometry ---------------------------------------------------------------


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 when disjoint."""
    a = a.as_array() if isinstance(a, Box) else np.asarray(a, dtype=np.float64)
    b = b.as_array() if isinstance(b, Box) else np.asarray(b, dtype=np.float64)
    return float(iou_matrix(a[None, :], b[None, :])[0, 0])


def box_area(boxes: np.ndarray) -> np.ndarray:
    return (boxes[..., 2] - boxes[..., 0]) * (boxes[..., 3] - boxes[..., 1])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """[N, M] IoU between every box of ``a`` [N, 4] and ``b`` [M, 4]."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    iy = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(ix, 0, None) * np.clip(iy, 0, None)
    union = box_area(a)[:, None] + box_area(b)[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def encode_boxes(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    """Regression targets [N, 4] = (dx, dy, dw, dh) of ``gt`` relative to ``anchors``."""
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 4)
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    gw = gt[:, 2] - gt[:, 0]
    gh = gt[:, 3] - gt[:, 1]
    gx = gt[:, 0] + gw / 2
    gy = gt[:, 1] + gh / 2
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_boxes(
    deltas: np.ndarray, anchors: np.ndarray, max_log_ratio: Optional[float] = None
) -> np.ndarray:
    """Inverse of ``encode_boxes``.

    Raises:
        NumericalError: If any delta is non-finite
    """
    deltas = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if not np.all(np.isfinite(deltas)):
        raise NumericalError("decode_boxes: non-finite box delta")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + aw / 2
    ay = anchors[:, 1] + ah / 2
    dw, dh = deltas[:, 2], deltas[:, 3]
    if max_log_ratio is not None:
        dw = np.minimum(dw, max_log_ratio)
        dh = np.minimum(dh, max_log_ratio)
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(dw)
    h = ah * np.exp(dh)
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def encode_box(gt: Box, anchor: Box) -> BoxDelta:
    return BoxDelta(*encode_boxes(gt.as_array(), anchor.as_array())[0])


def decode_box(delta: BoxDelta, anchor: Box) -> Box:
    return Box.from_array(decode_boxes(delta.as_array(), anchor.as_array())[0])


def clip_boxes(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    out[:, [0, 2]] = np.clip(out[:, [0, 2]], 0, width)
    out[:, [1, 3]] = np.clip(out[:, [1, 3]], 0, height)
    return out


# -- anchors ----------------------------------------------------------------


def level_extent(extent: int, stride: int) -> int:
    """Feature-map extent of a pyramid level for an input extent (ceil division)."""
    return -(-extent // stride)


def generate_anchors(image_w: int, image_h: int, config: DetectorConfig) -> AnchorSet:
    """Anchors of every pyramid level, clipped to the image.

    Each location (i, j) of a level with stride s is centered at
    ((j + 0.5)·s, (i + 0.5)·s); a ratio r = h/w anchor of size S has
    w = S/√r and h = S·√r (area S²).
    """
    ratios = np.asarray(config.aspect_ratios, dtype=np.float64)
    all_boxes, all_levels = [], []
    for level, stride, size in config.levels:
        rows = level_extent(image_h, stride)
        cols = level_extent(image_w, stride)
        cy, cx = np.meshgrid((np.arange(rows) + 0.5) * stride, (np.arange(cols) + 0.5) * stride, indexing="ij")
        half_w = size / np.sqrt(ratios) / 2
        half_h = size * np.sqrt(ratios) / 2
        cx = cx[:, :, None]
        cy = cy[:, :, None]
        boxes = np.stack(
            np.broadcast_arrays(cx - half_w, cy - half_h, cx + half_w, cy + half_h), axis=-1
        ).reshape(-1, 4)
        all_boxes.append(clip_boxes(boxes, image_w, image_h))
        all_levels.append(np.full(len(boxes), level, dtype=int))
    return AnchorSet(boxes=np.concatenate(all_boxes), levels=np.concatenate(all_levels))


def anchor_count(image_w: int, image_h: int, config: DetectorConfig) -> int:
    return sum(
        level_extent(image_w, stride) * level_extent(image_h, stride) * config.anchors_per_location
        for _, stride, _ in config.levels
    )


def assign(
    anchors: np.ndarray,
    ground_truths: np.ndarray,
    threshold: float = 0.5,
    force_match: bool = True,
) -> AnchorAssignment:
    """Label anchors positive iff IoU > threshold with some ground truth.

    With ``force_match`` the highest-IoU anchor of every ground truth (lowest
    index on ties, IoU > 0) is also made positive, adding at most one
    positive per ground truth.
    """
    if not 0 < threshold < 1:
        raise ParameterError(f"Assignment threshold must lie in (0, 1), got {threshold}")
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    n = len(anchors)
    ground_truths = np.asarray(ground_truths, dtype=np.float64).reshape(-1, 4)
    if len(ground_truths) == 0:
        return AnchorAssignment(
            labels=np.zeros(n, dtype=int),
            matched=np.full(n, -1, dtype=int),
            max_iou=np.zeros(n),
            forced=np.zeros(n, dtype=bool),
        )
    overlaps = iou_matrix(anchors, ground_truths)  # [A, G]
    best_gt = overlaps.argmax(axis=1)
    max_iou = overlaps[np.arange(n), best_gt]
    positive = max_iou > threshold
    labels = positive.astype(int)
    matched = np.where(positive, best_gt, -1)
    forced = np.zeros(n, dtype=bool)
    if force_match:
        for g in range(len(ground_truths)):
            best_anchor = int(overlaps[:, g].argmax())
            if overlaps[best_anchor, g] <= 0 or labels[best_anchor] == 1:
                continue
            labels[best_anchor] = 1
            matched[best_anchor] = g
            forced[best_anchor] = True
    return AnchorAssignment(labels=labels, matched=matched, max_iou=max_iou, forced=forced)


def nms(
    boxes: np.ndarray,
    scores: np.ndarray,
    iou_threshold: float = 0.5,
    order_keys: Optional[np.ndarray] = None,
    max_keep: Optional[int] = None,
) -> np.ndarray:
    """Greedy non-maximum suppression.

    Boxes are visited by descending score, ties broken by ascending
    ``order_keys`` (anchor index; position by default). A box is dropped when
    its IoU with an already kept box exceeds ``iou_threshold``.

    Returns:
        Indices of kept boxes, in visiting order
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if len(boxes) == 0:
        return np.zeros(0, dtype=int)
    if not np.all(np.isfinite(scores)):
        raise NumericalError("nms: non-finite scores")
    keys = np.arange(len(boxes)) if order_keys is None else np.asarray(order_keys)
    order = np.lexsort((keys, -scores))
    keep = []
    suppressed = np.zeros(len(boxes), dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        keep.append(idx)
        if max_keep is not None and len(keep) >= max_keep:
            break
        overlaps = iou_matrix(boxes[idx][None, :], boxes)[0]
        suppressed |= overlaps > iou_threshold
    return np.array(keep, dtype=int)


def nms_proposals(proposals: List[Proposal], iou_threshold: float = 0.5) -> List[Proposal]:
    if not proposals:
        return []
    boxes = np.stack([p.box for p in proposals])
    scores = np.array([p.score for p in proposals])
    keys = np.array([p.anchor_index for p in proposals])
    return [proposals[i] for i in nms(boxes, scores, iou_threshold, keys)]


# -- FPN and RPN head -------------------------------------------------------


@dataclass
class RpnOutput:
    """Head outputs in anchor order: logits [A] and deltas [A, 4]."""

    logits: Tensor
    deltas: Tensor


class RegionProposalNetwork:
    """FPN over C3..C5 plus a shared 3×3 conv head on every level.

    Laterals are 1×1 projections to ``fpn_channels`` merged top-down by
    nearest upsampling; P6 is a stride-2 3×3 conv of P5 and P7 of relu(P6).

    Attributes:
        config: Detector configuration
        parameters: Parameter store (names prefixed ``rpn.``)
    """

    SUPPORTED_LEVELS = (3, 4, 5, 6, 7)

    def __init__(
        self,
        config: DetectorConfig,
        stage_channels: Sequence[int],
        parameters: ParameterSet,
        rng: np.random.Generator,
    ):
        if tuple(config.pyramid_levels) != self.SUPPORTED_LEVELS:
            raise ConfigError(
                f"Pyramid levels {tuple(config.pyramid_levels)} are not buildable; "
                f"this network provides {self.SUPPORTED_LEVELS}"
            )
        self.config = config
        self.parameters = parameters
        width = config.fpn_channels
        anchors = config.anchors_per_location
        c3, c4, c5 = stage_channels[2], stage_channels[3], stage_channels[4]

        def conv(name, c_out, c_in, k):
            limit = np.sqrt(6.0 / ((c_in + c_out) * k * k))
            parameters.add(f"rpn.{name}.weight", rng.uniform(-limit, limit, size=(c_out, c_in, k, k)))
            parameters.add(f"rpn.{name}.bias", np.zeros(c_out))

        conv("lateral3", width, c3, 1)
        conv("lateral4", width, c4, 1)
        conv("lateral5", width, c5, 1)
        conv("p6", width, width, 3)
        conv("p7", width, width, 3)
        conv("head", width, width, 3)
        conv("head.cls", anchors, width, 1)
        conv("head.box", 4 * anchors, width, 1)

    def parameter_count(self) -> int:
        return self.parameters.count("rpn.")

    def _conv(self, name: str, x: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
        return conv2d(
            x,
            self.parameters[f"rpn.{name}.weight"],
            self.parameters[f"rpn.{name}.bias"],
            stride=stride,
            padding=padding,
        )

    def pyramid(self, maps: Dict[str, Tensor]) -> Dict[int, Tensor]:
        """Build {level: P_level} from backbone maps C3..C5."""
        for stage in ("C3", "C4", "C5"):
            if stage not in maps:
                raise ConfigError(f"Backbone map {stage} is missing for the FPN")
        p5 = self._conv("lateral5", maps["C5"])
        p4 = add(self._conv("lateral4", maps["C4"]), upsample_nearest(p5))
        p3 = add(self._conv("lateral3", maps["C3"]), upsample_nearest(p4))
        p6 = self._conv("p6", p5, stride=2, padding=1)
        p7 = self._conv("p7", relu(p6), stride=2, padding=1)
        return {3: p3, 4: p4, 5: p5, 6: p6, 7: p7}

    def check_pyramid(self, pyramid: Dict[int, Tensor], image_w: int, image_h: int):
        """Raise ConfigError unless the maps line up with the anchor grid."""
        if sorted(pyramid) != sorted(self.config.pyramid_levels):
            raise ConfigError(
                f"Feature levels {sorted(pyramid)} do not match configured levels "
                f"{sorted(self.config.pyramid_levels)}"
            )
        for level, stride, _ in self.config.levels:
            expected = (level_extent(image_h, stride), level_extent(image_w, stride))
            if tuple(pyramid[level].shape[1:]) != expected:
                raise ConfigError(
                    f"Level {level} map is {pyramid[level].shape[1:]}, anchors expect {expected}"
                )

    def head(self, pyramid: Dict[int, Tensor]) -> RpnOutput:
        """Objectness logits and box deltas for every anchor, in anchor order."""
        anchors = self.config.anchors_per_location
        logits, deltas = [], []
        for level in self.config.pyramid_levels:
            hidden = relu(self._conv("head", pyramid[level], padding=1))
            cls = self._conv("head.cls", hidden)  # [A, h, w]
            box = self._conv("head.box", hidden)  # [4A, h, w]
            _, h, w = cls.shape
            logits.append(cls.transpose(1, 2, 0).reshape(-1))
            deltas.append(box.reshape(anchors, 4, h, w).transpose(2, 3, 0, 1).reshape(-1, 4))
        return RpnOutput(logits=concat(logits, axis=0), deltas=concat(deltas, axis=0))


def propose(
    output: RpnOutput,
    anchors: AnchorSet,
    config: DetectorConfig,
    image_w: int,
    image_h: int,
    top_k: Optional[int] = None,
) -> List[Proposal]:
    """Score, decode, clip and suppress anchors; return at most ``top_k`` proposals."""
    if len(output.logits) != len(anchors):
        raise ConfigError(
            f"Head produced {len(output.logits)} scores for {len(anchors)} anchors"
        )
    top_k = config.top_k if top_k is None else top_k
    scores = expit(output.logits.values.astype(np.float64))
    boxes = decode_boxes(output.deltas.values, anchors.boxes, max_log_ratio=MAX_LOG_RATIO)
    boxes = clip_boxes(boxes, image_w, image_h)
    valid = np.flatnonzero((boxes[:, 2] - boxes[:, 0] >= 1.0) & (boxes[:, 3] - boxes[:, 1] >= 1.0))
    keep = valid[nms(boxes[valid], scores[valid], config.nms_iou, order_keys=valid, max_keep=top_k)]
    return [
        Proposal(box=boxes[i], level=int(anchors.levels[i]), score=float(scores[i]), anchor_index=int(i))
        for i in keep
    ]


def proposals_to_json(proposals: List[Proposal]) -> List[Dict]:
    return [p.to_dict() for p in proposals]


def boxes_from_json(records: List[Dict]) -> np.ndarray:
    try:
        return np.array([r["box"] for r in records], dtype=np.float64).reshape(-1, 4)
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"Malformed box records: {e}") from e
