"""
Grayscale Image Type and File I/O

8-bit PNG and PGM images are mapped linearly to intensities in [0, 1]
(value / 255) on read, and quantized back with rounding on write.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from models.errors import DataError, ParameterError


@dataclass(frozen=True)
class GrayImage:
    """Grayscale image with intensities in [0, 1].

    Attributes:
        pixels: float64 array of shape (height, width)
    """

    pixels: np.ndarray

    def __post_init__(self):
        pixels = np.asarray(self.pixels, dtype=np.float64)
        if pixels.ndim != 2 or pixels.size == 0:
            raise ParameterError(f"GrayImage needs a non-empty 2-D array, got shape {pixels.shape}")
        if not np.all(np.isfinite(pixels)) or pixels.min() < 0 or pixels.max() > 1:
            raise ParameterError("GrayImage intensities must lie within [0, 1]")
        pixels.setflags(write=False)
        object.__setattr__(self, "pixels", pixels)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @classmethod
    def from_array(cls, values: np.ndarray) -> "GrayImage":
        """Build an image from arbitrary reals, clipping into [0, 1]."""
        return cls(np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0))

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255.0).astype(np.uint8)


def read_image(path: Union[str, Path]) -> GrayImage:
    """Read an 8-bit grayscale PNG or PGM file.

    Raises:
        DataError: If the file is missing, corrupt or not decodable
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"Image not found: {path}")
    try:
        with Image.open(path) as img:
            img.load()
            array = np.asarray(img.convert("L"), dtype=np.float64)
    except (UnidentifiedImageError, OSError, ValueError) as e:
        raise DataError(f"Cannot decode image {path}: {e}") from e
    return GrayImage(array / 255.0)


def write_image(image: GrayImage, path: Union[str, Path]):
    """Write ``image`` as 8-bit grayscale; the suffix selects PNG or PGM."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix not in (".png", ".pgm"):
        raise DataError(f"Unsupported image format: {suffix} (use .png or .pgm)")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(image.to_uint8()).save(path, format="PNG" if suffix == ".png" else "PPM")
    except OSError as e:
        raise DataError(f"Cannot write image {path}: {e}") from e
