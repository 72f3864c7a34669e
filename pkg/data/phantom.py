"""
Synthetic Phantom Generator

Renders section-specific grayscale "phantoms" standing in for clinical
frames: every essential structure is a parameterized primitive (ellipse,
line or crescent) at an anatomically plausible position inside a bright
context ring (skull, abdominal wall or thorax). Degradations reproduce the
usual acquisition problems: multiplicative speckle, acoustic shadow wedges
and a rotated fetal position. Confusable look-alike structures are added as
unannotated distractors, and burnt-in overlay text sits in the top margin.

Non-standard samples omit or blur at least one essential structure. Omitted
structures have no annotation; blurred ones are annotated with flag 0.

Example:
    >>> from data.phantom import generate_sample, DegradeParams
    >>> sample = generate_sample("head", standard=True, params=DegradeParams(), seed=7)
    >>> len(sample.annotations)
    6
"""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from joblib import Parallel, delayed
from loguru import logger
from scipy import ndimage
from tqdm import tqdm

from data.dataset import (
    MANIFEST_NAME,
    NON_STANDARD,
    STANDARD,
    Annotation,
    PhantomSample,
    SplitSpec,
    derive_plane_label,
    split_dataset,
    write_json,
)
from data.image_io import GrayImage, write_image
from models.classifier import SECTION_STRUCTURES
from models.config import PhantomConfig
from models.errors import DataError, ParameterError

BACKGROUND_LEVEL = 0.28
CONTEXT_LEVEL = 0.72
DARK_LEVEL = 0.06
BRIGHT_LEVEL = 0.86
BLUR_CONTRAST = 0.3  # fraction of contrast kept by a blurred structure
BLUR_SIGMA = 2.0
TEXT_LEVEL = 1.0


@dataclass(frozen=True)
class Primitive:
    """Shape in coordinates normalized to the image side.

    ``kind`` is ellipse (semi-axes a, b), line (length a, thickness b) or
    crescent (ellipse a, b minus the same ellipse shifted by ``cut`` along
    its minor axis).
    """

    kind: str
    cx: float
    cy: float
    a: float
    b: float
    angle: float = 0.0
    level: float = DARK_LEVEL
    cut: float = 0.5


# Layouts are (structure, primitive) in normalized coordinates.
SECTION_LAYOUTS: Dict[str, List[Tuple[str, Primitive]]] = {
    "head": [
        ("BM", Primitive("line", 0.50, 0.50, 0.42, 0.035, level=BRIGHT_LEVEL)),
        ("CSP", Primitive("ellipse", 0.34, 0.42, 0.060, 0.040, level=DARK_LEVEL)),
        ("T", Primitive("ellipse", 0.56, 0.40, 0.075, 0.060, level=0.16)),
        ("TV", Primitive("ellipse", 0.45, 0.58, 0.050, 0.030, level=DARK_LEVEL)),
        ("LS", Primitive("crescent", 0.30, 0.68, 0.085, 0.060, level=BRIGHT_LEVEL, cut=0.55)),
        ("CP", Primitive("ellipse", 0.68, 0.66, 0.070, 0.045, angle=20.0, level=BRIGHT_LEVEL)),
    ],
    "abdominal": [
        ("ST", Primitive("ellipse", 0.38, 0.44, 0.100, 0.075, level=DARK_LEVEL)),
        ("UV", Primitive("ellipse", 0.58, 0.38, 0.070, 0.035, angle=-15.0, level=0.10)),
        ("SP", Primitive("crescent", 0.50, 0.72, 0.070, 0.060, level=BRIGHT_LEVEL, cut=0.6)),
        ("AO", Primitive("ellipse", 0.62, 0.62, 0.040, 0.040, level=DARK_LEVEL)),
    ],
    "heart": [
        ("LV", Primitive("ellipse", 0.40, 0.40, 0.080, 0.070, level=DARK_LEVEL)),
        ("RV", Primitive("ellipse", 0.60, 0.40, 0.080, 0.070, level=DARK_LEVEL)),
        ("LA", Primitive("ellipse", 0.40, 0.60, 0.075, 0.060, level=0.10)),
        ("RA", Primitive("ellipse", 0.60, 0.60, 0.075, 0.060, level=0.10)),
        ("DAO", Primitive("ellipse", 0.45, 0.78, 0.040, 0.040, level=DARK_LEVEL)),
    ],
}

# Context ring (semi-axes, thickness) per section.
CONTEXT_RINGS = {"head": (0.40, 0.34, 0.035), "abdominal": (0.38, 0.36, 0.03), "heart": (0.38, 0.38, 0.03)}

# Unannotated look-alikes: a midline-like line, a gallbladder-like ellipse
# next to the umbilical vein, and an aorta-like vessel.
DISTRACTORS = {
    "head": Primitive("line", 0.50, 0.26, 0.22, 0.030, level=BRIGHT_LEVEL),
    "abdominal": Primitive("ellipse", 0.70, 0.46, 0.060, 0.032, angle=-10.0, level=0.10),
    "heart": Primitive("ellipse", 0.72, 0.80, 0.035, 0.035, level=DARK_LEVEL),
}


@dataclass(frozen=True)
class DegradeParams:
    """Degradation settings.

    Attributes:
        speckle_strength: Std of the multiplicative gamma noise, in [0, 1]
        shadow_count: Number of shadow wedges
        shadow_opacity: Darkening inside a wedge, in [0, 1]
        rotation: Whole-plane rotation in degrees, in [-45, 45]
        dropout: Structures to omit or blur (non-standard samples)
    """

    speckle_strength: float = 0.0
    shadow_count: int = 0
    shadow_opacity: float = 0.0
    rotation: float = 0.0
    dropout: Tuple[str, ...] = ()

    def __post_init__(self):
        if not 0 <= self.speckle_strength <= 1:
            raise ParameterError(f"speckle_strength must lie in [0, 1], got {self.speckle_strength}")
        if not 0 <= self.shadow_opacity <= 1:
            raise ParameterError(f"shadow_opacity must lie in [0, 1], got {self.shadow_opacity}")
        if self.shadow_count < 0:
            raise ParameterError(f"shadow_count must be non-negative, got {self.shadow_count}")
        if not -45 <= self.rotation <= 45:
            raise ParameterError(f"rotation must lie in [-45, 45] degrees, got {self.rotation}")


# -- rasterization ----------------------------------------------------------


def _grid(size: int) -> Tuple[np.ndarray, np.ndarray]:
    centers = np.arange(size) + 0.5
    return np.meshgrid(centers, centers)  # x (columns), y (rows)


def rasterize(primitive: Primitive, size: int) -> np.ndarray:
    """Boolean support of a primitive on a size×size pixel grid."""
    x, y = _grid(size)
    theta = math.radians(primitive.angle)
    dx = x - primitive.cx * size
    dy = y - primitive.cy * size
    u = dx * math.cos(theta) + dy * math.sin(theta)
    v = -dx * math.sin(theta) + dy * math.cos(theta)
    a, b = primitive.a * size, primitive.b * size
    if primitive.kind == "ellipse":
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    if primitive.kind == "line":
        return (np.abs(u) <= a / 2) & (np.abs(v) <= b / 2)
    if primitive.kind == "crescent":
        outer = (u / a) ** 2 + (v / b) ** 2 <= 1.0
        inner = (u / a) ** 2 + ((v + primitive.cut * b) / b) ** 2 <= 1.0
        return outer & ~inner
    raise ParameterError(f"Unknown primitive kind: {primitive.kind}")


def mask_box(mask: np.ndarray) -> Optional[Tuple[float, float, float, float]]:
    """Tight box (pixel edges) around a mask; None for an empty mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return (float(cols[0]), float(rows[0]), float(cols[-1] + 1), float(rows[-1] + 1))


def _ring(size: int, semi_x: float, semi_y: float, thickness: float) -> np.ndarray:
    x, y = _grid(size)
    r = np.sqrt(((x - size / 2) / (semi_x * size)) ** 2 + ((y - size / 2) / (semi_y * size)) ** 2)
    return np.abs(r - 1.0) <= thickness / min(semi_x, semi_y) / 2


def _jitter(primitive: Primitive, rng: np.random.Generator) -> Primitive:
    scale = rng.uniform(0.9, 1.1)
    return Primitive(
        kind=primitive.kind,
        cx=primitive.cx + rng.uniform(-0.03, 0.03),
        cy=primitive.cy + rng.uniform(-0.03, 0.03),
        a=primitive.a * scale,
        b=primitive.b * rng.uniform(0.9, 1.1) if primitive.kind != "line" else primitive.b,
        angle=primitive.angle + (rng.uniform(-10, 10) if primitive.kind == "ellipse" else 0.0),
        level=float(np.clip(primitive.level + rng.uniform(-0.03, 0.03), 0.0, 1.0)),
        cut=primitive.cut,
    )


def _overlay_text(pixels: np.ndarray, rng: np.random.Generator):
    """Burn a block of glyph-like bright marks into the top-left margin."""
    size = pixels.shape[0]
    height = max(3, size // 24)
    top = max(1, size // 64)
    x = max(1, size // 64)
    for _ in range(int(rng.integers(3, 6))):
        width = int(rng.integers(2, 5))
        if x + width >= size // 3:
            break
        glyph = rng.random((height, width)) < 0.7
        glyph[:, 0] = True
        region = pixels[top: top + height, x: x + width]
        region[glyph] = TEXT_LEVEL
        x += width + 1


# -- degradations -----------------------------------------------------------


def rotation_matrix(angle: float) -> np.ndarray:
    """(row, col) sampling matrix for a counter-clockwise display rotation."""
    theta = math.radians(angle)
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, s], [-s, c]])


def rotate_array(values: np.ndarray, angle: float, order: int = 1, cval: float = 0.0) -> np.ndarray:
    """Rotate a 2-D array about its center (counter-clockwise as displayed)."""
    matrix = rotation_matrix(angle)
    center = (np.array(values.shape, dtype=np.float64) - 1) / 2
    offset = center - matrix @ center
    return ndimage.affine_transform(values, matrix, offset=offset, order=order, mode="constant", cval=cval)


def rotate_boxes(boxes: np.ndarray, angle: float, width: float, height: float) -> np.ndarray:
    """Axis-aligned hulls of boxes rotated with the image, clipped to it."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if len(boxes) == 0 or angle == 0:
        return boxes.copy()
    theta = math.radians(angle)
    c, s = math.cos(theta), math.sin(theta)
    cx, cy = width / 2, height / 2
    xs = boxes[:, [0, 2, 2, 0]] - cx
    ys = boxes[:, [1, 1, 3, 3]] - cy
    rx = cx + c * xs + s * ys
    ry = cy - s * xs + c * ys
    hull = np.stack([rx.min(axis=1), ry.min(axis=1), rx.max(axis=1), ry.max(axis=1)], axis=1)
    hull[:, [0, 2]] = np.clip(hull[:, [0, 2]], 0, width)
    hull[:, [1, 3]] = np.clip(hull[:, [1, 3]], 0, height)
    return hull


def shadow_mask(size: int, rng: np.random.Generator) -> np.ndarray:
    """Wedge fanning down from a point above the top edge."""
    x, y = _grid(size)
    apex_x = size * rng.uniform(0.2, 0.8)
    apex_y = -0.2 * size
    direction = rng.uniform(-0.6, 0.6)
    half_width = rng.uniform(0.04, 0.10)
    angle = np.arctan2(x - apex_x, y - apex_y)
    return np.abs(angle - direction) <= half_width


def degrade(
    image: GrayImage,
    params: DegradeParams,
    seed: int,
    boxes: Optional[np.ndarray] = None,
) -> Tuple[GrayImage, np.ndarray]:
    """Rotate, shadow and speckle an image.

    Order: whole-plane rotation, shadow wedges, then multiplicative speckle.
    Boxes are mapped to the axis-aligned hull of their rotated corners.

    Returns:
        Degraded image and transformed boxes
    """
    rng = np.random.default_rng(seed)
    pixels = image.pixels
    boxes = np.zeros((0, 4)) if boxes is None else np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    changed = False
    if params.rotation != 0:
        pixels = rotate_array(pixels, params.rotation)
        boxes = rotate_boxes(boxes, params.rotation, image.width, image.height)
        changed = True
    if params.shadow_count > 0 and params.shadow_opacity > 0:
        pixels = pixels.copy()
        for _ in range(params.shadow_count):
            pixels[shadow_mask(image.height, rng)] *= 1.0 - params.shadow_opacity
        changed = True
    if params.speckle_strength > 0:
        shape = 1.0 / params.speckle_strength ** 2
        pixels = pixels * rng.gamma(shape, 1.0 / shape, size=pixels.shape)
        changed = True
    if not changed:
        return image, boxes
    return GrayImage.from_array(pixels), boxes


# -- samples ----------------------------------------------------------------


def sample_seed(seed: int, section: str, index: int) -> int:
    section_id = list(SECTION_STRUCTURES).index(section)
    return int(np.random.SeedSequence([seed, section_id, index]).generate_state(1)[0])


def generate_sample(
    section: str,
    standard: bool,
    params: DegradeParams,
    seed: int,
    image_size: int = 128,
    distractor_probability: float = 0.35,
    name: str = "",
) -> PhantomSample:
    """Render one phantom with exact ground truth.

    Non-standard samples drop every structure in ``params.dropout`` (a random
    essential structure when empty); each dropped structure is omitted or
    blurred with equal probability.

    Raises:
        ParameterError: For an unknown section or dropout structure
    """
    if section not in SECTION_LAYOUTS:
        raise ParameterError(f"Unknown section: {section}")
    essential = SECTION_STRUCTURES[section]
    unknown = [s for s in params.dropout if s not in essential]
    if unknown:
        raise ParameterError(f"Dropout structures {unknown} are not part of the {section} section")
    rng = np.random.default_rng(seed)
    size = image_size

    dropout = set() if standard else set(params.dropout)
    if not standard and not dropout:
        dropout = {essential[int(rng.integers(len(essential)))]}
    blurred = {s for s in sorted(dropout) if rng.random() < 0.5}
    omitted = dropout - blurred

    pixels = np.full((size, size), BACKGROUND_LEVEL)
    pixels += rng.normal(0.0, 0.02, size=(size, size))
    pixels[_ring(size, *CONTEXT_RINGS[section])] = CONTEXT_LEVEL

    if rng.random() < distractor_probability:
        distractor = _jitter(DISTRACTORS[section], rng)
        pixels[rasterize(distractor, size)] = distractor.level
        has_distractor = True
    else:
        has_distractor = False

    masks: Dict[str, np.ndarray] = {}
    for structure_id, base in SECTION_LAYOUTS[section]:
        primitive = _jitter(base, rng)
        if structure_id in omitted:
            continue
        mask = rasterize(primitive, size)
        if structure_id in blurred:
            target = BACKGROUND_LEVEL + BLUR_CONTRAST * (primitive.level - BACKGROUND_LEVEL)
            layer = np.where(mask, target - BACKGROUND_LEVEL, 0.0)
            pixels += ndimage.gaussian_filter(layer, BLUR_SIGMA)
        else:
            pixels[mask] = primitive.level
        masks[structure_id] = mask

    if params.rotation != 0:
        pixels = rotate_array(pixels, params.rotation)
        masks = {k: rotate_array(m.astype(np.float64), params.rotation, order=0) > 0.5 for k, m in masks.items()}
    rest = DegradeParams(
        speckle_strength=params.speckle_strength,
        shadow_count=params.shadow_count,
        shadow_opacity=params.shadow_opacity,
    )
    image, _ = degrade(GrayImage.from_array(pixels), rest, seed=int(rng.integers(2 ** 31)))
    pixels = image.pixels.copy()
    _overlay_text(pixels, rng)

    annotations = []
    for structure_id in essential:
        if structure_id not in masks:
            continue
        box = mask_box(masks[structure_id])
        if box is None:
            continue
        flag = 0 if structure_id in blurred else 1
        annotations.append(Annotation(structure_id, box, flag))

    sample = PhantomSample(
        image=GrayImage(np.clip(pixels, 0.0, 1.0)),
        section=section,
        annotations=annotations,
        plane_label=derive_plane_label(essential, annotations),
        seed=int(seed),
        name=name,
        masks=masks,
        has_distractor=has_distractor,
    )
    return sample


def random_params(
    config: PhantomConfig, section: str, standard: bool, rng: np.random.Generator
) -> DegradeParams:
    """Per-sample degradation drawn within the configured maxima."""
    essential = SECTION_STRUCTURES[section]
    dropout: Tuple[str, ...] = ()
    if not standard:
        count = int(rng.integers(1, 3))
        picks = rng.choice(len(essential), size=count, replace=False)
        dropout = tuple(sorted(essential[i] for i in picks))
    return DegradeParams(
        speckle_strength=float(rng.uniform(0.0, config.speckle_strength)),
        shadow_count=int(rng.integers(0, config.shadow_count + 1)),
        shadow_opacity=float(rng.uniform(0.0, config.shadow_opacity)),
        rotation=float(rng.uniform(-config.max_rotation, config.max_rotation)),
        dropout=dropout,
    )


def _render(config: PhantomConfig, seed: int, section: str, index: int, standard: bool) -> PhantomSample:
    s = sample_seed(seed, section, index)
    params = random_params(config, section, standard, np.random.default_rng(s))
    return generate_sample(
        section,
        standard,
        params,
        seed=s,
        image_size=config.image_size,
        distractor_probability=config.distractor_probability,
        name=f"{section}_{index:04d}",
    )


class PhantomGenerator:
    """Generate a phantom dataset on disk.

    Attributes:
        config: Counts per section, standard ratio and degradation maxima
        seed: Single seed all randomness derives from
    """

    def __init__(self, config: PhantomConfig, seed: int = 42):
        for section, count in config.counts.items():
            if section not in SECTION_LAYOUTS:
                raise ParameterError(f"Unknown section: {section}")
            if count < 5:
                raise ParameterError(f"At least 5 samples per section are needed, got {section}={count}")
        if not 0 <= config.standard_ratio <= 1:
            raise ParameterError(f"standard_ratio must lie in [0, 1], got {config.standard_ratio}")
        if config.image_format not in ("png", "pgm"):
            raise ParameterError(f"image_format must be png or pgm, got {config.image_format}")
        self.config = config
        self.seed = seed
        logger.info("Phantom generator initialized")

    def plan(self, section: str) -> List[bool]:
        """Standard/non-standard assignment of every index of a section."""
        count = self.config.counts[section]
        n_standard = int(round(count * self.config.standard_ratio))
        order = np.random.default_rng([self.seed, list(SECTION_STRUCTURES).index(section)]).permutation(count)
        standard = np.zeros(count, dtype=bool)
        standard[order[:n_standard]] = True
        return standard.tolist()

    def generate_section(self, section: str) -> List[PhantomSample]:
        plan = self.plan(section)
        logger.info(f"Generating {len(plan)} {section} phantoms...")
        jobs = (delayed(_render)(self.config, self.seed, section, i, std) for i, std in enumerate(plan))
        samples = Parallel(n_jobs=self.config.n_jobs)(
            tqdm(jobs, total=len(plan), desc=section, disable=None)
        )
        train, val, test = split_dataset(list(range(len(samples))), SplitSpec(seed=self.seed))
        for split_name, indices in (("train", train), ("val", val), ("test", test)):
            for i in indices:
                samples[i].split = split_name
        return samples

    def generate(self, out_dir: Union[str, Path]) -> Dict:
        """Write images, annotations and the manifest; return the manifest."""
        out_dir = Path(out_dir)
        try:
            (out_dir / "images").mkdir(parents=True, exist_ok=True)
            (out_dir / "annotations").mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise DataError(f"Cannot create output directory {out_dir}: {e}") from e

        entries = []
        for section in sorted(self.config.counts, key=list(SECTION_STRUCTURES).index):
            for sample in self.generate_section(section):
                image_path = f"images/{sample.name}.{self.config.image_format}"
                annotation_path = f"annotations/{sample.name}.json"
                write_image(sample.image, out_dir / image_path)
                write_json(out_dir / annotation_path, sample.annotation_record(image_path))
                entries.append(
                    {
                        "id": sample.name,
                        "image": image_path,
                        "annotation": annotation_path,
                        "section": sample.section,
                        "plane_label": sample.plane_label,
                        "split": sample.split,
                    }
                )
        manifest = {
            "format_version": 1,
            "seed": self.seed,
            "image_size": self.config.image_size,
            "counts": {s: self.config.counts[s] for s in sorted(self.config.counts)},
            "samples": sorted(entries, key=lambda e: e["id"]),
        }
        write_json(out_dir / MANIFEST_NAME, manifest)
        n_standard = sum(e["plane_label"] == STANDARD for e in entries)
        logger.info(
            f"Wrote {len(entries)} samples to {out_dir} "
            f"(standard={n_standard}, non-standard={len(entries) - n_standard})"
        )
        return manifest


def generate_dataset(config: PhantomConfig, seed: int, out_dir: Union[str, Path]) -> Dict:
    """Generate a dataset under ``out_dir``; see ``PhantomGenerator.generate``."""
    return PhantomGenerator(config, seed).generate(out_dir)


__all__ = [
    "DegradeParams",
    "NON_STANDARD",
    "PhantomGenerator",
    "PhantomSample",
    "STANDARD",
    "degrade",
    "generate_dataset",
    "generate_sample",
    "rasterize",
    "mask_box",
    "rotate_boxes",
]
