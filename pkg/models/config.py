"""
Configuration Module

Typed, frozen configuration sections loaded from ``config/model_config.yaml``
(or a JSON file with the same keys). Unknown keys are rejected before any
compute so a typo never silently falls back to a default.

Example:
    >>> from models.config import load_config
    >>> config = load_config("config/model_config.yaml", overrides={"random_seed": 7})
    >>> config.backbone.channel_scale
    16
"""

import dataclasses
import os
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import yaml
from dotenv import load_dotenv
from loguru import logger

from models.errors import ConfigError

DEFAULT_CONFIG_PATH = Path(__file__).resolve().parent.parent / "config" / "model_config.yaml"

SECTIONS = ("head", "abdominal", "heart")


@dataclass(frozen=True)
class PreprocessConfig:
    sigma: float = 1.0
    radius: Optional[int] = None  # ceil(3 * sigma) when unset
    text_threshold: float = 0.9
    border_band: float = 0.12  # fraction of each edge


@dataclass(frozen=True)
class BackboneConfig:
    """Feature extraction network settings.

    ``base_channels`` are the unscaled C1..C5 widths; ``channel_scale`` divides
    every one of them and must do so exactly.
    """

    base_channels: Tuple[int, ...] = (128, 256, 512, 1024, 2048)
    channel_scale: float = 16
    kernel_size: int = 3
    stride: int = 2
    spp_levels: Tuple[int, ...] = (1, 2, 4, 16)
    use_spp: bool = True
    dtype: str = "float32"

    @property
    def channels(self) -> Tuple[int, ...]:
        widths = []
        for base in self.base_channels:
            width = base / self.channel_scale
            if width < 1 or abs(width - round(width)) > 1e-9:
                raise ConfigError(
                    f"channel_scale {self.channel_scale} does not divide width {base} "
                    f"into a positive integer"
                )
            widths.append(int(round(width)))
        return tuple(widths)


@dataclass(frozen=True)
class RelationConfig:
    enabled: bool = True
    d_k: int = 16
    d_g: int = 32
    d_f: int = 64
    epsilon: float = 1e-3  # inside the log-distance terms
    epsilon_norm: float = 1e-12
    wave_length: float = 1000.0


@dataclass(frozen=True)
class DetectorConfig:
    pyramid_levels: Tuple[int, ...] = (3, 4, 5, 6, 7)
    strides: Tuple[int, ...] = (8, 16, 32, 64, 128)
    sizes: Tuple[int, ...] = (32, 64, 128, 256, 512)
    aspect_ratios: Tuple[float, ...] = (0.5, 1.0, 2.0)
    fpn_channels: int = 64
    positive_iou: float = 0.5
    force_match: bool = True
    nms_iou: float = 0.5
    top_k: int = 100

    @property
    def anchors_per_location(self) -> int:
        return len(self.aspect_ratios)

    @property
    def levels(self) -> Tuple[Tuple[int, int, int], ...]:
        """(pyramid_level, stride, size) rows, finest level first."""
        return tuple(zip(self.pyramid_levels, self.strides, self.sizes))


FpnConfig = DetectorConfig


@dataclass(frozen=True)
class ClassifierConfig:
    gamma: float = 2.0
    quality_cutoff: float = 0.5
    roi_spp_levels: Tuple[int, ...] = (1, 2, 4, 16)
    use_global_context: bool = True
    detection_nms_iou: float = 0.5


@dataclass(frozen=True)
class LossWeightsConfig:
    objectness: float = 1.0
    box: float = 1.0
    classification: float = 1.0
    quality: float = 1.0


@dataclass(frozen=True)
class TrainerConfig:
    epochs: int = 20
    batch_size: int = 4
    learning_rate: float = 0.01
    momentum: float = 0.9
    lr_decay: float = 0.1
    lr_decay_epochs: Tuple[int, ...] = (14, 18)
    grad_clip: Optional[float] = 10.0
    negatives_per_positive: int = 3
    rois_per_image: int = 32
    proposals_per_image: int = 64
    loss_weights: LossWeightsConfig = field(default_factory=LossWeightsConfig)
    checkpoint_every: int = 1


@dataclass(frozen=True)
class PhantomConfig:
    image_size: int = 128
    counts: Dict[str, int] = field(
        default_factory=lambda: {"head": 300, "abdominal": 300, "heart": 300}
    )
    standard_ratio: float = 0.5
    speckle_strength: float = 0.25
    shadow_count: int = 2
    shadow_opacity: float = 0.4
    max_rotation: float = 30.0
    distractor_probability: float = 0.35
    image_format: str = "png"
    n_jobs: int = 1


@dataclass(frozen=True)
class EvaluationConfig:
    iou_threshold: float = 0.5
    split: str = "test"
    boxplot: bool = True


@dataclass(frozen=True)
class ReportConfig:
    annotate: bool = True
    banner_height: int = 10


@dataclass(frozen=True)
class LoggingConfig:
    level: str = "INFO"
    format: str = (
        "<green>{time:YYYY-MM-DD HH:mm:ss}</green> | <level>{level: <8}</level> | "
        "<cyan>{name}</cyan>:<cyan>{function}</cyan> - <level>{message}</level>"
    )
    log_file: Optional[str] = None


@dataclass(frozen=True)
class OutputConfig:
    checkpoint_name: str = "checkpoint.joblib"
    metrics_log_name: str = "metrics.csv"
    compression: int = 3


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration for one CLI run."""

    random_seed: int = 42
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    relation: RelationConfig = field(default_factory=RelationConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    report: ReportConfig = field(default_factory=ReportConfig)
    logging: LoggingConfig = field(default_factory=LoggingConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def to_dict(self) -> Dict[str, Any]:
        return to_plain(self)


def to_plain(value: Any) -> Any:
    """Convert nested dataclasses and tuples into JSON/YAML-friendly values."""
    if dataclasses.is_dataclass(value):
        return {f.name: to_plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, dict):
        return {k: to_plain(v) for k, v in value.items()}
    return value


INT_TYPES = (int, Optional[int])


def _coerce(value: Any, current: Any, path: str, declared: Any = None) -> Any:
    if isinstance(current, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        return tuple(value)
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if declared in INT_TYPES and value is not None:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        if isinstance(value, float):
            if not value.is_integer():
                raise ConfigError(f"{path}: expected an integer, got {value!r}")
            return int(value)
        return value
    if isinstance(current, (int, float)) and not isinstance(value, (int, float)):
        if value is None:
            return None
        raise ConfigError(f"{path}: expected a number, got {value!r}")
    return value


def build_section(cls, values: Optional[Dict[str, Any]], path: str):
    """Instantiate dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if values is None:
        return cls()
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(values).__name__}")
    defaults = cls()
    known = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"Unknown configuration key(s) in '{path}': {unknown}")
    kwargs = {}
    for name, value in values.items():
        current = getattr(defaults, name)
        key_path = f"{path}.{name}" if path else name
        if dataclasses.is_dataclass(current):
            kwargs[name] = build_section(type(current), value, key_path)
        else:
            kwargs[name] = _coerce(value, current, key_path, hints.get(name))
    return cls(**kwargs)


def validate(config: RunConfig) -> RunConfig:
    """Check cross-field constraints that dataclass defaults cannot express."""
    config.backbone.channels  # raises on a non-dividing channel_scale
    if config.backbone.dtype not in ("float32", "float64"):
        raise ConfigError(f"backbone.dtype must be float32 or float64, got {config.backbone.dtype}")
    if config.relation.d_g % 8 != 0:
        raise ConfigError(f"relation.d_g must be divisible by 8, got {config.relation.d_g}")
    if min(config.relation.d_k, config.relation.d_f, config.relation.d_g) < 1:
        raise ConfigError("relation dimensions must be positive")
    if config.relation.epsilon_norm <= 0:
        raise ConfigError("relation.epsilon_norm must be positive")
    det = config.detector
    if not (len(det.pyramid_levels) == len(det.strides) == len(det.sizes)):
        raise ConfigError("detector.pyramid_levels, strides and sizes must have equal length")
    for level, stride in zip(det.pyramid_levels, det.strides):
        if stride != 2 ** level:
            raise ConfigError(f"detector stride {stride} does not match pyramid level {level}")
    if not det.aspect_ratios or min(det.aspect_ratios) <= 0:
        raise ConfigError("detector.aspect_ratios must be positive and non-empty")
    if config.classifier.gamma < 0:
        raise ConfigError("classifier.gamma must be non-negative")
    weights = config.trainer.loss_weights
    terms = (weights.objectness, weights.box, weights.classification, weights.quality)
    if min(terms) < 0 or max(terms) == 0:
        raise ConfigError("trainer.loss_weights must be non-negative and not all zero")
    unknown_sections = sorted(set(config.phantom.counts) - set(SECTIONS))
    if unknown_sections:
        raise ConfigError(f"phantom.counts has unknown sections: {unknown_sections}")
    if config.phantom.image_size % 32 != 0:
        raise ConfigError("phantom.image_size must be divisible by 32")
    return config


def _read_file(path: Union[str, Path]) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"Config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        try:
            # JSON is a subset of YAML, so one loader serves both
            values = yaml.safe_load(f) or {}
        except yaml.YAMLError as e:
            raise ConfigError(f"Cannot parse config file {path}: {e}") from e
    if not isinstance(values, dict):
        raise ConfigError(f"Config file {path} must hold a mapping at top level")
    return values


def _merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def load_config(
    path: Optional[Union[str, Path]] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> RunConfig:
    """Resolve a RunConfig: dataclass defaults < config file < overrides.

    Args:
        path: YAML or JSON config file. ``None`` uses defaults only.
        overrides: Nested mapping applied last (typically from CLI flags)

    Raises:
        ConfigError: On unknown keys, type mismatches or inconsistent values
    """
    values: Dict[str, Any] = _read_file(path) if path is not None else {}
    if overrides:
        values = _merge(values, overrides)
    return validate(build_section(RunConfig, values, ""))


def config_from_dict(values: Dict[str, Any]) -> RunConfig:
    return validate(build_section(RunConfig, values, ""))


def setup_logging(config: Optional[LoggingConfig] = None):
    """Install loguru sinks for stderr and an optional rotating file.

    ``FSQA_LOG_LEVEL`` and ``FSQA_LOG_FILE`` (environment or ``.env``) take
    precedence over the config values.
    """
    load_dotenv()
    config = config or LoggingConfig()
    level = os.getenv("FSQA_LOG_LEVEL", config.level).upper()
    log_file = os.getenv("FSQA_LOG_FILE", config.log_file)

    logger.remove()
    logger.add(sys.stderr, level=level, format=config.format)
    if log_file:
        Path(log_file).parent.mkdir(parents=True, exist_ok=True)
        logger.add(log_file, level=level, format=config.format, rotation="10 MB")
