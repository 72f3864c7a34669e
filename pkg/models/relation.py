"""
Object Relation Module

Augments each ROI's appearance feature with an attention-weighted sum of the
other ROIs' features. The weight of ROI m on ROI n combines a geometry term
(ReLU of a projected sinusoidal embedding of the relative box geometry) and an
appearance term (scaled dot product of key/query projections):

    w[m, n] = w_G[m, n] · exp(w_A[m, n]) / Σ_k w_G[k, n] · exp(w_A[k, n])
    f_R(n)  = Σ_m w[m, n] · (W_V f_A(m))
    fused   = f_A + f_R

A column whose denominator falls below ``epsilon_norm`` is uniform (1/N).
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from models.checkpoint import ParameterSet
from models.config import RelationConfig
from models.errors import ConfigError, ContractError, DimensionError
from models.tensor import Tensor, as_tensor, exp, matmul, relu


@dataclass
class RelationParams:
    W_G: Tensor  # [d_g]
    W_K: Tensor  # [d_k, d_f]
    W_Q: Tensor  # [d_k, d_f]
    W_V: Tensor  # [d_f, d_f]


@dataclass
class RoiFeatureSet:
    """Appearance vectors and (cx, cy, w, h) geometry for N ≥ 1 ROIs."""

    appearance: Tensor
    geometry: np.ndarray

    def __post_init__(self):
        self.geometry = np.asarray(self.geometry, dtype=np.float64).reshape(-1, 4)
        if len(self.geometry) < 1:
            raise ContractError("A ROI feature set needs at least one ROI")
        if self.appearance.ndim != 2 or self.appearance.shape[0] != len(self.geometry):
            raise DimensionError(
                f"Appearance {self.appearance.shape} does not match {len(self.geometry)} boxes"
            )
        if np.any(self.geometry[:, 2:] <= 0):
            raise ContractError("ROI widths and heights must be positive")

    def __len__(self) -> int:
        return len(self.geometry)


def boxes_to_geometry(boxes: np.ndarray) -> np.ndarray:
    """[x_min, y_min, x_max, y_max] rows to [cx, cy, w, h] rows."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    w = boxes[:, 2] - boxes[:, 0]
    h = boxes[:, 3] - boxes[:, 1]
    return np.stack([boxes[:, 0] + w / 2, boxes[:, 1] + h / 2, w, h], axis=1)


def relative_geometry(geometry: np.ndarray, epsilon: float = 1e-3) -> np.ndarray:
    """[N, N, 4] log-geometry of every ordered pair (m, n)."""
    cx, cy, w, h = (geometry[:, i] for i in range(4))
    dx = np.log(np.abs(cx[:, None] - cx[None, :]) / w[:, None] + epsilon)
    dy = np.log(np.abs(cy[:, None] - cy[None, :]) / h[:, None] + epsilon)
    dw = np.log(w[None, :] / w[:, None])
    dh = np.log(h[None, :] / h[:, None])
    return np.stack([dx, dy, dw, dh], axis=-1)


def lift(raw: np.ndarray, d_g: int, wave_length: float = 1000.0) -> np.ndarray:
    """Sinusoidal lifting of 4-vectors (last axis) to ``d_g`` dimensions.

    Each component is scaled by 100 and divided by d_g/8 geometrically spaced
    wavelengths up to ``wave_length``; sines then cosines are concatenated.
    """
    if d_g % 8 != 0 or d_g < 8:
        raise ConfigError(f"Geometric embedding dimension must be a positive multiple of 8, got {d_g}")
    n_freq = d_g // 8
    wavelengths = wave_length ** (np.arange(n_freq) / n_freq)
    position = (100.0 * raw[..., :, None]) / wavelengths  # [..., 4, n_freq]
    position = position.reshape(raw.shape[:-1] + (4 * n_freq,))
    return np.concatenate([np.sin(position), np.cos(position)], axis=-1)


def geometric_embed(
    box_m: np.ndarray,
    box_n: np.ndarray,
    d_g: int,
    epsilon: float = 1e-3,
    wave_length: float = 1000.0,
) -> np.ndarray:
    """Embedding of the pair (box_m, box_n), each given as (cx, cy, w, h)."""
    geometry = np.array([box_m, box_n], dtype=np.float64)
    if np.any(geometry[:, 2:] <= 0):
        raise ContractError("Box extents must be positive")
    raw = relative_geometry(geometry, epsilon)[0, 1]
    return lift(raw, d_g, wave_length)


def geometry_weight(params: RelationParams, embed) -> Tensor:
    """max(0, W_G · embed); ``embed`` may be [d_g] or [..., d_g]."""
    embed = as_tensor(embed, like=params.W_G)
    if embed.ndim == 1:
        return relu(matmul(params.W_G, embed))
    flat = embed.reshape(-1, embed.shape[-1])
    return relu(matmul(flat, params.W_G)).reshape(embed.shape[:-1])


def appearance_weight(f_m: Tensor, f_n: Tensor, params: RelationParams, d_k: int) -> Tensor:
    key = matmul(params.W_K, f_m)
    query = matmul(params.W_Q, f_n)
    return matmul(key, query) * (1.0 / np.sqrt(d_k))


def appearance_weights(features: Tensor, params: RelationParams, d_k: int) -> Tensor:
    """[N, N] matrix of appearance weights for all ordered pairs."""
    keys = matmul(features, params.W_K.T)
    queries = matmul(features, params.W_Q.T)
    return matmul(keys, queries.T) * (1.0 / np.sqrt(d_k))


def normalize_columns(w_g: Tensor, w_a: Tensor, epsilon_norm: float = 1e-12) -> Tensor:
    """Column-normalize w_G · exp(w_A), with the uniform fallback.

    The column maximum of w_A is subtracted (as a constant) before
    exponentiating; the degeneracy test is made on the unshifted denominator
    in the log domain.
    """
    n = w_g.shape[0]
    shift = w_a.values.max(axis=0, keepdims=True)
    numerator = w_g * exp(w_a - shift)
    denominator = numerator.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore"):
        log_denominator = np.log(denominator.values) + shift
    degenerate = (log_denominator < np.log(epsilon_norm)).astype(w_g.dtype)
    keep = 1.0 - degenerate
    safe = denominator * keep + degenerate
    return (numerator / safe) * keep + degenerate / n


def relation_weights(roi_set: RoiFeatureSet, params: RelationParams, config: RelationConfig) -> Tensor:
    """[N, N] relation weight matrix; every column is a probability vector."""
    raw = relative_geometry(roi_set.geometry, config.epsilon)
    embed = lift(raw, config.d_g, config.wave_length)
    w_g = geometry_weight(params, embed)
    w_a = appearance_weights(roi_set.appearance, params, config.d_k)
    return normalize_columns(w_g, w_a, config.epsilon_norm)


def relation_features(roi_set: RoiFeatureSet, weights: Tensor, params: RelationParams) -> Tensor:
    """Per-ROI relation features f_R = weightsᵀ · (F W_Vᵀ).

    Raises:
        ContractError: If a weight column does not sum to 1
    """
    tolerance = 1e-9 if weights.dtype == np.float64 else 1e-5
    column_sums = weights.values.sum(axis=0)
    if np.any(np.abs(column_sums - 1.0) > tolerance):
        raise ContractError(f"Relation weight columns must sum to 1, got {column_sums}")
    values = matmul(roi_set.appearance, params.W_V.T)
    return matmul(weights.T, values)


class RelationModule:
    """Single-head relation module over one image's ROI features.

    Attributes:
        config: Relation configuration
        params: Projections registered under ``relation.``
    """

    def __init__(self, config: RelationConfig, parameters: ParameterSet, rng: np.random.Generator):
        if config.d_g % 8 != 0:
            raise ConfigError(f"relation.d_g must be divisible by 8, got {config.d_g}")
        self.config = config
        self.parameters = parameters
        d_f, d_k, d_g = config.d_f, config.d_k, config.d_g

        def init(shape, fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=shape)

        self.params = RelationParams(
            W_G=parameters.add("relation.W_G", init((d_g,), d_g, 1)),
            W_K=parameters.add("relation.W_K", init((d_k, d_f), d_f, d_k)),
            W_Q=parameters.add("relation.W_Q", init((d_k, d_f), d_f, d_k)),
            W_V=parameters.add("relation.W_V", init((d_f, d_f), d_f, d_f)),
        )

    def parameter_count(self) -> int:
        return self.parameters.count("relation.")

    def __call__(self, appearance: Tensor, boxes: np.ndarray, weights_out: Optional[list] = None) -> Tensor:
        """Fuse appearance features [N, d_f] of ROIs ``boxes`` (xyxy rows)."""
        if not self.config.enabled:
            return appearance
        roi_set = RoiFeatureSet(appearance, boxes_to_geometry(boxes))
        weights = relation_weights(roi_set, self.params, self.config)
        if weights_out is not None:
            weights_out.append(weights)
        return appearance + relation_features(roi_set, weights, self.params)
