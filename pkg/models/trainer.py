"""
End-to-End Multi-Task Training

Trains the FEN, RPN, relation module and CPN jointly with one combined loss:

    λ_obj·BCE(objectness) + λ_box·smoothL1(deltas, positives)
        + λ_cls·focal(class) + λ_q·focal(quality flag)

Each term is a mean over its own sampled items. Optimization is SGD with
momentum and step learning-rate decay. A checkpoint is written after every
epoch together with a row of the metrics CSV (losses, learning rate,
validation mAP and plane accuracy).

All randomness (shuffling, negative sampling, ROI sampling) derives from the
run seed and the (epoch, step, image) position, so a resumed run repeats the
exact losses of an uninterrupted one.

Example:
    >>> from models.trainer import Trainer
    >>> trainer = Trainer(load_config(), sections=["head"])
    >>> result = trainer.fit(dataset.split("train"), dataset.split("val"), "runs/exp1")
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from tqdm import tqdm

from data.dataset import PhantomDataset, PhantomSample, SplitSpec, split_dataset
from data.image_io import GrayImage
from data.preprocess import ImagePreprocessor
from models.checkpoint import ParameterSet, load_checkpoint, save_checkpoint
from models.classifier import binary_p_t, focal_loss_tensor
from models.config import LossWeightsConfig, RunConfig
from models.detector import assign, encode_boxes, iou_matrix
from models.errors import ConfigError, ContractError, NumericalError, ParameterError
from models.evaluation import Evaluator, validation_scores
from models.network import ForwardPass, QualityNet
from models.tensor import Tensor, backward, reduce_mean, reduce_sum, sigmoid, smooth_l1

LOSS_TERMS = ("objectness", "box", "classification", "quality")
LOG_COLUMNS = [
    "epoch",
    "loss_total",
    "loss_objectness",
    "loss_box",
    "loss_classification",
    "loss_quality",
    "lr",
    "val_map",
    "val_acc",
]


@dataclass(frozen=True)
class LossWeights:
    objectness: float = 1.0
    box: float = 1.0
    classification: float = 1.0
    quality: float = 1.0

    def __post_init__(self):
        values = [self.objectness, self.box, self.classification, self.quality]
        if min(values) < 0:
            raise ConfigError(f"Loss weights must be non-negative, got {values}")
        if max(values) == 0:
            raise ConfigError("Loss weights must not all be zero")

    @classmethod
    def from_config(cls, config: LossWeightsConfig) -> "LossWeights":
        return cls(config.objectness, config.box, config.classification, config.quality)


@dataclass
class HeadOutputs:
    """Differentiable head outputs for the sampled items of one image.

    Attributes:
        objectness_prob: [S] sigmoid objectness of the sampled anchors
        deltas: [P, 4] predicted box deltas of the positive anchors
        class_probs: [R, K+1] class distribution of the sampled ROIs
        quality_prob: [R] quality probability of the sampled ROIs
    """

    objectness_prob: Tensor
    deltas: Tensor
    class_probs: Tensor
    quality_prob: Tensor


@dataclass
class HeadTargets:
    objectness: np.ndarray  # [S] 0/1
    box_targets: np.ndarray  # [P, 4]
    class_targets: np.ndarray  # [R] class index, 0 = background
    quality_targets: np.ndarray  # [R] 0/1
    quality_mask: np.ndarray  # [R] True for foreground ROIs


def _zero(like: Tensor) -> Tensor:
    return Tensor(0.0, dtype=like.dtype)


def total_loss(
    outputs: HeadOutputs,
    targets: HeadTargets,
    weights: LossWeights = LossWeights(),
    gamma: float = 2.0,
) -> Tuple[Tensor, Dict[str, float]]:
    """Weighted sum of the four mean-normalized task losses.

    Returns:
        Scalar loss and the unweighted value of every term

    Raises:
        ContractError: If no anchors were sampled
    """
    if outputs.objectness_prob.size == 0:
        raise ContractError("Loss batch has no sampled anchors")
    probs = outputs.objectness_prob
    terms: Dict[str, Tensor] = {}
    terms["objectness"] = reduce_mean(focal_loss_tensor(binary_p_t(probs, targets.objectness), gamma=0.0))

    n_pos = outputs.deltas.shape[0]
    if n_pos:
        residual = outputs.deltas - np.asarray(targets.box_targets, dtype=outputs.deltas.dtype)
        terms["box"] = reduce_sum(smooth_l1(residual)) * (1.0 / n_pos)
    else:
        terms["box"] = _zero(probs)

    n_rois = outputs.class_probs.shape[0]
    if n_rois:
        class_targets = np.asarray(targets.class_targets, dtype=int)
        pt = outputs.class_probs[np.arange(n_rois), class_targets]
        terms["classification"] = reduce_mean(focal_loss_tensor(pt, gamma))
    else:
        terms["classification"] = _zero(probs)

    foreground = np.flatnonzero(np.asarray(targets.quality_mask, dtype=bool))
    if foreground.size:
        quality = outputs.quality_prob[foreground]
        pt = binary_p_t(quality, np.asarray(targets.quality_targets)[foreground])
        terms["quality"] = reduce_mean(focal_loss_tensor(pt, gamma))
    else:
        terms["quality"] = _zero(probs)

    loss = (
        terms["objectness"] * weights.objectness
        + terms["box"] * weights.box
        + terms["classification"] * weights.classification
        + terms["quality"] * weights.quality
    )
    return loss, {name: float(terms[name].item()) for name in LOSS_TERMS}


class MomentumSGD:
    """v ← μ·v + g;  p ← p − η·v, with optional global-norm clipping and step decay.

    Attributes:
        parameters: Parameter store to update
        velocity: Momentum buffer per parameter name
    """

    def __init__(
        self,
        parameters: ParameterSet,
        learning_rate: float = 0.01,
        momentum: float = 0.9,
        grad_clip: Optional[float] = None,
        lr_decay: float = 0.1,
        milestones: Sequence[int] = (),
    ):
        if learning_rate <= 0:
            raise ParameterError(f"Learning rate must be positive, got {learning_rate}")
        if not 0 <= momentum < 1:
            raise ParameterError(f"Momentum must lie in [0, 1), got {momentum}")
        self.parameters = parameters
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.grad_clip = grad_clip
        self.lr_decay = lr_decay
        self.milestones = tuple(sorted(milestones))
        self.velocity: Dict[str, np.ndarray] = {name: np.zeros_like(t.values) for name, t in parameters}

    @classmethod
    def from_config(cls, parameters: ParameterSet, config) -> "MomentumSGD":
        return cls(
            parameters,
            learning_rate=config.learning_rate,
            momentum=config.momentum,
            grad_clip=config.grad_clip,
            lr_decay=config.lr_decay,
            milestones=config.lr_decay_epochs,
        )

    def learning_rate_at(self, epoch: int) -> float:
        """Rate for a 1-based epoch: decayed once per milestone already reached."""
        return self.learning_rate * self.lr_decay ** sum(1 for m in self.milestones if epoch >= m)

    def step(self, epoch: int = 1) -> float:
        """Apply one update from the current gradients; return the gradient norm."""
        grads = {
            name: (t.grad if t.grad is not None else np.zeros_like(t.values)) for name, t in self.parameters
        }
        norm = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
        if not np.isfinite(norm):
            raise NumericalError("Gradient norm is not finite; training diverged")
        scale = 1.0
        if self.grad_clip is not None and norm > self.grad_clip:
            scale = self.grad_clip / norm
        lr = self.learning_rate_at(epoch)
        for name, tensor in self.parameters:
            v = self.momentum * self.velocity[name] + scale * grads[name]
            self.velocity[name] = v.astype(tensor.dtype)
            tensor.values = (tensor.values - lr * v).astype(tensor.dtype)
        return norm

    def state(self) -> Dict[str, np.ndarray]:
        return {name: v.copy() for name, v in self.velocity.items()}

    def load_state(self, velocity: Optional[Dict[str, np.ndarray]]):
        if not velocity:
            return
        if set(velocity) != set(self.velocity):
            raise ConfigError("Optimizer state does not match the network parameters")
        self.velocity = {name: np.asarray(v).astype(self.parameters[name].dtype) for name, v in velocity.items()}


@dataclass
class TrainingResult:
    checkpoint_path: Path
    metrics_path: Path
    history: pd.DataFrame

    @property
    def final_loss(self) -> Optional[float]:
        return float(self.history["loss_total"].iloc[-1]) if len(self.history) else None


def _fmt(value: Optional[float]) -> str:
    return f"{value:.4f}" if value is not None else "n/a"


class Trainer:
    """Joint training of a ``QualityNet``.

    Attributes:
        config: Resolved run configuration
        net: Network being trained
        optimizer: Momentum SGD over the network's parameters
        start_epoch: First epoch to run (after a resume, last saved + 1)
    """

    def __init__(
        self,
        config: RunConfig,
        sections: Sequence[str] = ("head", "abdominal", "heart"),
        net: Optional[QualityNet] = None,
    ):
        self.config = config
        self.seed = config.random_seed
        self.net = net or QualityNet(config, seed=self.seed, sections=sections)
        self.weights = LossWeights.from_config(config.trainer.loss_weights)
        self.optimizer = MomentumSGD.from_config(self.net.parameters, config.trainer)
        self.preprocessor = ImagePreprocessor.from_config(config.preprocess)
        self.start_epoch = 1
        self._cache: Dict[str, GrayImage] = {}
        logger.info(
            f"Trainer initialized: {config.trainer.epochs} epochs, batch {config.trainer.batch_size}, "
            f"sections {self.net.sections}"
        )

    # -- targets -----------------------------------------------------------

    def prepared(self, sample: PhantomSample) -> GrayImage:
        key = sample.name or str(id(sample))
        if key not in self._cache:
            self._cache[key] = self.preprocessor.process(sample.image)
        return self._cache[key]

    def sample_anchors(self, forward: ForwardPass, gt_boxes: np.ndarray, rng: np.random.Generator):
        """All positives and at most ``negatives_per_positive``·max(1, P) negatives."""
        detector = self.config.detector
        assignment = assign(forward.anchors.boxes, gt_boxes, detector.positive_iou, detector.force_match)
        positives = assignment.positives
        negatives = assignment.negatives
        n_neg = min(len(negatives), self.config.trainer.negatives_per_positive * max(1, len(positives)))
        if n_neg < len(negatives):
            negatives = np.sort(rng.choice(negatives, size=n_neg, replace=False))
        return assignment, positives, negatives

    def sample_rois(
        self, forward: ForwardPass, sample: PhantomSample, rng: np.random.Generator
    ) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Ground-truth boxes plus proposals, labelled by IoU > positive_iou.

        Returns:
            ROI boxes [R, 4], class targets [R] and quality targets [R]
        """
        gt_boxes = sample.boxes
        proposals = self.net.propose(forward, top_k=self.config.trainer.proposals_per_image)
        proposal_boxes = np.array([p.box for p in proposals], dtype=np.float64).reshape(-1, 4)
        boxes = np.concatenate([gt_boxes, proposal_boxes], axis=0)
        class_ids = np.array([self.net.registry.index_of(s) for s in sample.structure_ids], dtype=int)
        flags = sample.flags

        labels = np.zeros(len(boxes), dtype=int)
        quality = np.zeros(len(boxes), dtype=int)
        if len(gt_boxes):
            overlaps = iou_matrix(boxes, gt_boxes)
            best = overlaps.argmax(axis=1)
            hit = overlaps[np.arange(len(boxes)), best] > self.config.detector.positive_iou
            labels[hit] = class_ids[best[hit]]
            quality[hit] = flags[best[hit]]

        limit = self.config.trainer.rois_per_image
        foreground = np.flatnonzero(labels > 0)[:limit]
        background = np.flatnonzero(labels == 0)
        ratio = self.config.trainer.negatives_per_positive
        n_bg = min(len(background), limit - len(foreground), ratio * max(1, len(foreground)))
        if n_bg < len(background):
            background = np.sort(rng.choice(background, size=max(n_bg, 0), replace=False))
        keep = np.concatenate([foreground, background])
        return boxes[keep], labels[keep], quality[keep]

    def image_loss(
        self, sample: PhantomSample, rng: np.random.Generator
    ) -> Tuple[Tensor, Dict[str, float]]:
        forward = self.net.forward(self.prepared(sample))
        gt_boxes = sample.boxes
        assignment, positives, negatives = self.sample_anchors(forward, gt_boxes, rng)
        sampled = np.concatenate([positives, negatives])
        objectness = sigmoid(forward.rpn.logits[sampled])
        deltas = forward.rpn.deltas[positives]
        box_targets = encode_boxes(gt_boxes[assignment.matched[positives]], forward.anchors.boxes[positives])

        roi_boxes, class_targets, quality_targets = self.sample_rois(forward, sample, rng)
        class_probs, quality = self.net.classify_rois(forward, roi_boxes, sample.section)
        outputs = HeadOutputs(objectness, deltas, class_probs, quality)
        targets = HeadTargets(
            objectness=assignment.labels[sampled],
            box_targets=box_targets,
            class_targets=class_targets,
            quality_targets=quality_targets,
            quality_mask=class_targets > 0,
        )
        return total_loss(outputs, targets, self.weights, self.config.classifier.gamma)

    def batch_loss(
        self, batch: Sequence[PhantomSample], epoch: int, step: int
    ) -> Tuple[Tensor, Dict[str, float]]:
        """Mean of the per-image losses of a batch."""
        losses, breakdowns = [], []
        for index, sample in enumerate(batch):
            rng = np.random.default_rng([self.seed, epoch, step, index])
            loss, parts = self.image_loss(sample, rng)
            losses.append(loss)
            breakdowns.append(parts)
        total = losses[0]
        for loss in losses[1:]:
            total = total + loss
        total = total * (1.0 / len(losses))
        breakdown = {name: float(np.mean([b[name] for b in breakdowns])) for name in LOSS_TERMS}
        return total, breakdown

    def train_step(self, batch: Sequence[PhantomSample], epoch: int, step: int) -> Dict[str, float]:
        """One forward/backward/update; returns the loss breakdown.

        Raises:
            NumericalError: If the loss is not finite
        """
        self.net.parameters.zero_grad()
        loss, breakdown = self.batch_loss(batch, epoch, step)
        value = loss.item()
        if not np.isfinite(value):
            raise NumericalError(
                f"Training diverged at epoch {epoch} step {step}: loss={value} terms={breakdown}"
            )
        backward(loss)
        self.optimizer.step(epoch)
        breakdown["total"] = value
        return breakdown

    # -- epochs ------------------------------------------------------------

    def batches(self, samples: Sequence[PhantomSample], epoch: int) -> List[List[PhantomSample]]:
        order = np.random.default_rng([self.seed, epoch]).permutation(len(samples))
        size = self.config.trainer.batch_size
        return [[samples[i] for i in order[k: k + size]] for k in range(0, len(order), size)]

    def train_epoch(self, samples: Sequence[PhantomSample], epoch: int) -> Dict[str, float]:
        totals: Dict[str, List[float]] = {name: [] for name in ("total",) + LOSS_TERMS}
        batches = self.batches(samples, epoch)
        progress = tqdm(batches, desc=f"epoch {epoch}", disable=None)
        for step, batch in enumerate(progress):
            parts = self.train_step(batch, epoch, step)
            for name in totals:
                totals[name].append(parts[name])
            progress.set_postfix(loss=f"{parts['total']:.4f}")
        return {name: float(np.mean(values)) for name, values in totals.items()}

    def validate(self, samples: Sequence[PhantomSample]) -> Tuple[Optional[float], Optional[float]]:
        if not samples:
            return None, None
        summary, _ = Evaluator(self.net, self.config).evaluate(samples)
        return validation_scores(summary)

    def save(self, path: Union[str, Path], epoch: int):
        save_checkpoint(
            path,
            self.net.parameters,
            self.config.to_dict(),
            self.net.sections,
            epoch=epoch,
            velocity=self.optimizer.state(),
            compression=self.config.output.compression,
        )

    def resume(self, path: Union[str, Path]) -> int:
        """Restore parameters, momentum and epoch counter from a checkpoint."""
        payload = load_checkpoint(path)
        self.net = QualityNet.from_checkpoint(payload)
        self.optimizer = MomentumSGD.from_config(self.net.parameters, self.config.trainer)
        self.optimizer.load_state(payload.get("velocity"))
        self.start_epoch = int(payload["epoch"]) + 1
        logger.info(f"Resuming from {path} at epoch {self.start_epoch}")
        return self.start_epoch

    def fit(
        self,
        train_samples: Sequence[PhantomSample],
        val_samples: Sequence[PhantomSample],
        out_dir: Union[str, Path],
        resume: bool = False,
    ) -> TrainingResult:
        """Train for the configured epochs, checkpointing after each one."""
        if not train_samples:
            raise ContractError("Training needs at least one sample")
        out_dir = Path(out_dir)
        checkpoint_path = out_dir / self.config.output.checkpoint_name
        metrics_path = out_dir / self.config.output.metrics_log_name
        history = pd.DataFrame(columns=LOG_COLUMNS)
        if resume:
            self.resume(checkpoint_path)
            if metrics_path.exists():
                history = pd.read_csv(metrics_path)
                history = history[history["epoch"] < self.start_epoch].reset_index(drop=True)

        epochs = self.config.trainer.epochs
        for epoch in range(self.start_epoch, epochs + 1):
            lr = self.optimizer.learning_rate_at(epoch)
            losses = self.train_epoch(train_samples, epoch)
            val_map, val_acc = self.validate(val_samples)
            logger.info(
                f"Epoch {epoch}/{epochs}: loss={losses['total']:.4f} "
                f"(obj={losses['objectness']:.4f}, box={losses['box']:.4f}, "
                f"cls={losses['classification']:.4f}, q={losses['quality']:.4f}) "
                f"lr={lr:g} val_mAP={_fmt(val_map)} val_ACC={_fmt(val_acc)}"
            )
            row = {
                "epoch": epoch,
                "loss_total": losses["total"],
                "loss_objectness": losses["objectness"],
                "loss_box": losses["box"],
                "loss_classification": losses["classification"],
                "loss_quality": losses["quality"],
                "lr": lr,
                "val_map": val_map,
                "val_acc": val_acc,
            }
            history = pd.concat([history, pd.DataFrame([row])], ignore_index=True)[LOG_COLUMNS]
            out_dir.mkdir(parents=True, exist_ok=True)
            history.to_csv(metrics_path, index=False)
            if epoch % self.config.trainer.checkpoint_every == 0 or epoch == epochs:
                self.save(checkpoint_path, epoch)
        return TrainingResult(checkpoint_path, metrics_path, history)


def train(
    config: RunConfig,
    dataset: PhantomDataset,
    out_dir: Union[str, Path],
    resume: bool = False,
) -> TrainingResult:
    """Train on the dataset's train split, validating on its val split."""
    trainer = Trainer(config, sections=dataset.sections)
    return trainer.fit(dataset.split("train"), dataset.split("val"), out_dir, resume=resume)


__all__ = [
    "HeadOutputs",
    "HeadTargets",
    "LossWeights",
    "MomentumSGD",
    "SplitSpec",
    "Trainer",
    "TrainingResult",
    "split_dataset",
    "total_loss",
    "train",
]
