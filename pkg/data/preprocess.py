"""
Image Preprocessing Module

Prepares raw sonographic frames for the detection network:
- Overlay text removal: bright pixels inside a border band are replaced by the
  band's typical (median) tissue intensity
- Gaussian smoothing with a rotationally symmetric, normalized kernel and
  reflect padding at the borders

Example:
    >>> from data.preprocess import ImagePreprocessor
    >>> preprocessor = ImagePreprocessor(sigma=1.0)
    >>> clean = preprocessor.process(image)
"""

import math
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np
from loguru import logger
from scipy import ndimage

from data.image_io import GrayImage
from models.errors import ParameterError


@dataclass(frozen=True)
class GaussianKernel:
    """Normalized 2-D Gaussian sampled at integer offsets in [-radius, radius]².

    ``weights[radius + dy, radius + dx]`` is the weight at offset (dx, dy).
    """

    sigma: float
    radius: int
    weights: np.ndarray

    def at(self, dx: int, dy: int) -> float:
        return float(self.weights[self.radius + dy, self.radius + dx])

    def profile(self) -> np.ndarray:
        """Normalized 1-D factor g with outer(g, g) == weights."""
        offsets = np.arange(-self.radius, self.radius + 1, dtype=np.float64)
        g = np.exp(-(offsets ** 2) / (2 * self.sigma ** 2))
        return g / g.sum()


def default_radius(sigma: float) -> int:
    return max(1, int(math.ceil(3 * sigma)))


def gaussian_kernel(sigma: float, radius: Optional[int] = None) -> GaussianKernel:
    """Build a Gaussian kernel with weights ∝ exp(-(x²+y²)/(2σ²)), summing to 1.

    Args:
        sigma: Standard deviation in pixels, > 0
        radius: Half-width in pixels, ≥ 1 (default ceil(3σ))

    Raises:
        ParameterError: If sigma ≤ 0 or radius < 1
    """
    if not sigma > 0:
        raise ParameterError(f"Gaussian sigma must be positive, got {sigma}")
    radius = default_radius(sigma) if radius is None else int(radius)
    if radius < 1:
        raise ParameterError(f"Gaussian radius must be at least 1, got {radius}")
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    squared = offsets[:, None] ** 2 + offsets[None, :] ** 2
    weights = np.exp(-squared / (2 * sigma ** 2))
    weights = weights / weights.sum()
    weights.setflags(write=False)
    return GaussianKernel(sigma=float(sigma), radius=radius, weights=weights)


def smooth(image: GrayImage, kernel: GaussianKernel) -> GrayImage:
    """Convolve with ``kernel`` using reflect padding at the borders."""
    out = ndimage.convolve(image.pixels, kernel.weights, mode="reflect")
    return GrayImage(np.clip(out, 0.0, 1.0))


def smooth_separable(image: GrayImage, kernel: GaussianKernel) -> GrayImage:
    """Same result as ``smooth`` computed as two 1-D passes."""
    g = kernel.profile()
    out = ndimage.convolve1d(image.pixels, g, axis=0, mode="reflect")
    out = ndimage.convolve1d(out, g, axis=1, mode="reflect")
    return GrayImage(np.clip(out, 0.0, 1.0))


def border_mask(height: int, width: int, border_band: Union[int, float]) -> np.ndarray:
    """Boolean mask of the band along all four edges.

    ``border_band`` below 1 is a fraction of each dimension; otherwise pixels.
    """
    if border_band < 1:
        band_y = int(round(border_band * height))
        band_x = int(round(border_band * width))
    else:
        band_y = band_x = int(border_band)
    mask = np.zeros((height, width), dtype=bool)
    if band_y > 0:
        mask[:band_y, :] = True
        mask[height - band_y:, :] = True
    if band_x > 0:
        mask[:, :band_x] = True
        mask[:, width - band_x:] = True
    return mask


def strip_overlay_text(
    image: GrayImage, threshold: float = 0.9, border_band: Union[int, float] = 0.12
) -> GrayImage:
    """Remove bright overlay text from the image margins.

    Pixels inside the border band brighter than ``threshold`` are replaced by
    the median of the band's remaining pixels (``threshold`` itself when the
    whole band is bright). Replaced pixels never exceed the threshold, so a
    second application changes nothing.

    Raises:
        ParameterError: If threshold is outside (0, 1)
    """
    if not 0 < threshold < 1:
        raise ParameterError(f"Text threshold must lie in (0, 1), got {threshold}")
    band = border_mask(image.height, image.width, border_band)
    if not band.any():
        logger.warning("Border band is empty; overlay text removal skipped")
        return image
    pixels = image.pixels
    text = band & (pixels > threshold)
    if not text.any():
        return image
    background = pixels[band & ~text]
    fill = float(np.median(background)) if background.size else threshold
    out = pixels.copy()
    out[text] = fill
    return GrayImage(out)


class ImagePreprocessor:
    """Text removal followed by Gaussian smoothing.

    Attributes:
        kernel: Gaussian kernel used for smoothing
        text_threshold: Intensity above which margin pixels count as text
        border_band: Band width (fraction of each edge or pixels)
    """

    def __init__(
        self,
        sigma: float = 1.0,
        radius: Optional[int] = None,
        text_threshold: float = 0.9,
        border_band: Union[int, float] = 0.12,
    ):
        self.kernel = gaussian_kernel(sigma, radius)
        if not 0 < text_threshold < 1:
            raise ParameterError(f"Text threshold must lie in (0, 1), got {text_threshold}")
        self.text_threshold = text_threshold
        self.border_band = border_band

    @classmethod
    def from_config(cls, config) -> "ImagePreprocessor":
        return cls(
            sigma=config.sigma,
            radius=config.radius,
            text_threshold=config.text_threshold,
            border_band=config.border_band,
        )

    def process(self, image: GrayImage) -> GrayImage:
        stripped = strip_overlay_text(image, self.text_threshold, self.border_band)
        return smooth(stripped, self.kernel)
