"""
Feature Extraction Network

Five stride-2 stages C1..C5 (3×3 kernels, widths 128/256/512/1024/2048 divided
by ``channel_scale``), each with a residual 1×1 projection skip:

    C_s = relu(conv3x3_s2(C_{s-1}) + b) + proj1x1_s2(C_{s-1})

plus global average pooling and spatial pyramid pooling.

Example:
    >>> from models.backbone import build_fen
    >>> fen = build_fen(BackboneConfig(channel_scale=16), seed=0)
    >>> maps = fen.extract(image)
    >>> maps["C5"].shape
    (128, 4, 4)
"""

from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
from loguru import logger

from data.image_io import GrayImage
from models.checkpoint import ParameterSet
from models.config import BackboneConfig
from models.errors import DimensionError, ParameterError
from models.tensor import Tensor, add, apply_op, conv2d, relu

STAGES = ("C1", "C2", "C3", "C4", "C5")
MIN_INPUT = 32


def xavier_uniform(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    """Uniform in ±sqrt(6 / (fan_in + fan_out))."""
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def conv_weights(rng: np.random.Generator, c_out: int, c_in: int, k: int) -> np.ndarray:
    return xavier_uniform(rng, (c_out, c_in, k, k), c_in * k * k, c_out * k * k)


def global_avg_pool(feature_map: Tensor) -> Tensor:
    """Per-channel mean of a [C, H, W] map."""
    if feature_map.ndim != 3 or min(feature_map.shape[1:]) < 1:
        raise DimensionError(f"global_avg_pool expects a non-empty [C,H,W] map, got {feature_map.shape}")
    return feature_map.mean(axis=(1, 2))


def _cell_indices(extent: int, grid: int) -> np.ndarray:
    """Row (or column) indices covered by each of ``grid`` cells, padded.

    Cell i spans [floor(i·n/g), max(floor((i+1)·n/g), floor(i·n/g) + 1)),
    so grids finer than the map fall back to one-pixel cells (with
    repeats). Short cells are padded by repeating their last index.
    """
    starts = np.floor(np.arange(grid) * extent / grid).astype(int)
    ends = np.floor(np.arange(1, grid + 1) * extent / grid).astype(int)
    ends = np.minimum(np.maximum(ends, starts + 1), extent)
    width = int((ends - starts).max())
    offsets = np.arange(width)
    return np.minimum(starts[:, None] + offsets[None, :], (ends - 1)[:, None])


def spp(feature_map: Tensor, levels: Sequence[int] = (1, 2, 4, 16)) -> Tensor:
    """Spatial pyramid max pooling of a [C, H, W] map.

    Output layout: levels in ascending grid size; within a level the bins are
    channel-major ([C, g, g] flattened). Length is C·Σg², whatever H and W.
    """
    if not levels:
        raise ParameterError("spp requires at least one pyramid level")
    if feature_map.ndim != 3 or min(feature_map.shape[1:]) < 1:
        raise DimensionError(f"spp expects a non-empty [C,H,W] map, got {feature_map.shape}")
    channels, height, width = feature_map.shape
    values = feature_map.values
    pooled, rows_hit, cols_hit = [], [], []
    for grid in sorted(levels):
        rows = _cell_indices(height, grid)  # [g, hmax]
        cols = _cell_indices(width, grid)  # [g, wmax]
        gathered = values[:, rows[:, None, :, None], cols[None, :, None, :]]  # [C,g,g,hmax,wmax]
        flat = gathered.reshape(channels, grid, grid, -1)
        winner = flat.argmax(axis=-1)
        pooled.append(np.take_along_axis(flat, winner[..., None], axis=-1)[..., 0].reshape(-1))
        wmax = cols.shape[1]
        r_local, c_local = np.divmod(winner, wmax)
        gi = np.arange(grid)
        rows_hit.append(rows[gi[None, :, None], r_local].reshape(-1))
        cols_hit.append(cols[gi[None, None, :], c_local].reshape(-1))
    out = np.concatenate(pooled)
    channel_of_bin = np.concatenate(
        [np.repeat(np.arange(channels), g * g) for g in sorted(levels)]
    )
    row_of_bin = np.concatenate(rows_hit)
    col_of_bin = np.concatenate(cols_hit)

    def backward(g):
        grad = np.zeros_like(values)
        np.add.at(grad, (channel_of_bin, row_of_bin, col_of_bin), g)
        return (grad,)

    return apply_op("spp", out, (feature_map,), backward)


def spp_length(channels: int, levels: Sequence[int]) -> int:
    return channels * sum(g * g for g in levels)


class FeatureExtractor:
    """Table-driven conv stack; read-only during inference.

    Attributes:
        config: Backbone configuration
        parameters: Shared parameter store (names prefixed ``fen.``)
        channels: Stage widths after scaling
    """

    def __init__(self, config: BackboneConfig, parameters: ParameterSet, rng: np.random.Generator):
        self.config = config
        self.parameters = parameters
        self.channels = config.channels
        k = config.kernel_size
        c_in = 1
        for stage, c_out in zip(STAGES, self.channels):
            parameters.add(f"fen.{stage}.weight", conv_weights(rng, c_out, c_in, k))
            parameters.add(f"fen.{stage}.bias", np.zeros(c_out))
            parameters.add(f"fen.{stage}.proj", conv_weights(rng, c_out, c_in, 1))
            c_in = c_out

    def parameter_count(self) -> int:
        return self.parameters.count("fen.")

    def as_input(self, image: Union[GrayImage, np.ndarray, Tensor]) -> Tensor:
        """Validate the frame size and lift it to a [1, H, W] tensor."""
        if isinstance(image, Tensor):
            tensor = image if image.ndim == 3 else image.reshape((1,) + image.shape)
        else:
            pixels = image.pixels if isinstance(image, GrayImage) else np.asarray(image)
            tensor = Tensor(pixels[None, :, :], dtype=self.parameters.dtype)
        height, width = tensor.shape[1:]
        if height < MIN_INPUT or width < MIN_INPUT:
            raise DimensionError(f"Input {height}x{width} is smaller than {MIN_INPUT}x{MIN_INPUT}")
        if height % 32 or width % 32:
            raise DimensionError(f"Input {height}x{width} is not divisible by 32")
        return tensor

    def extract(self, image: Union[GrayImage, np.ndarray, Tensor]) -> Dict[str, Tensor]:
        """Run the five stages; returns {"C1": ..., "C5": ...}."""
        x = self.as_input(image)
        maps: Dict[str, Tensor] = {}
        stride = self.config.stride
        pad = self.config.kernel_size // 2
        for stage in STAGES:
            weight = self.parameters[f"fen.{stage}.weight"]
            bias = self.parameters[f"fen.{stage}.bias"]
            proj = self.parameters[f"fen.{stage}.proj"]
            residual = relu(conv2d(x, weight, bias, stride=stride, padding=pad))
            skip = conv2d(x, proj, None, stride=stride, padding=0)
            x = add(residual, skip)
            maps[stage] = x
        return maps


def build_fen(
    config: BackboneConfig,
    seed: int = 0,
    parameters: Optional[ParameterSet] = None,
    rng: Optional[np.random.Generator] = None,
) -> FeatureExtractor:
    """Create a feature extractor with deterministic initialization.

    Raises:
        ConfigError: If channel_scale does not divide the stage widths
    """
    parameters = parameters if parameters is not None else ParameterSet(dtype=config.dtype)
    rng = rng if rng is not None else np.random.default_rng(seed)
    fen = FeatureExtractor(config, parameters, rng)
    logger.debug(f"FEN widths {fen.channels}, {fen.parameter_count():,} parameters")
    return fen
