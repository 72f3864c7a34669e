"""
Annotated Sample Types, Manifest Loading and Dataset Splits

Annotation JSON (one file per image)::

    {"image": "images/head_0000.png", "section": "head",
     "structures": [{"class": "BM", "box": [x_min, y_min, x_max, y_max], "flag": 1}],
     "plane_label": "standard", "seed": 123}

The manifest lists every sample with relative paths and its split; it is the
single entry point for training and evaluation.
"""

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, TypeVar, Union

import numpy as np
import pandas as pd
from loguru import logger

from data.image_io import GrayImage, read_image
from models.errors import DataError

STANDARD = "standard"
NON_STANDARD = "non-standard"
SPLITS = ("train", "val", "test")
MANIFEST_NAME = "manifest.json"

T = TypeVar("T")


@dataclass(frozen=True)
class Annotation:
    structure_id: str
    box: Tuple[float, float, float, float]
    flag: int

    def to_dict(self) -> Dict:
        return {"class": self.structure_id, "box": [float(v) for v in self.box], "flag": int(self.flag)}

    @classmethod
    def from_dict(cls, record: Dict) -> "Annotation":
        return cls(
            structure_id=str(record["class"]), box=tuple(float(v) for v in record["box"]), flag=int(record["flag"])
        )


@dataclass
class PhantomSample:
    """Image with exact ground truth.

    Attributes:
        image: Grayscale frame
        section: head, abdominal or heart
        annotations: One entry per rendered essential structure
        plane_label: standard iff every essential structure is present with flag 1
        seed: Seed the sample was generated from
        name: Stable identifier (file stem)
    """

    image: GrayImage
    section: str
    annotations: List[Annotation]
    plane_label: str
    seed: int
    name: str = ""
    split: str = ""
    has_distractor: bool = False
    masks: Optional[Dict[str, np.ndarray]] = field(default=None, repr=False, compare=False)

    @property
    def boxes(self) -> np.ndarray:
        return np.array([a.box for a in self.annotations], dtype=np.float64).reshape(-1, 4)

    @property
    def structure_ids(self) -> List[str]:
        return [a.structure_id for a in self.annotations]

    @property
    def flags(self) -> np.ndarray:
        return np.array([a.flag for a in self.annotations], dtype=int)

    def annotation_record(self, image_path: str) -> Dict:
        return {
            "image": image_path,
            "section": self.section,
            "structures": [a.to_dict() for a in self.annotations],
            "plane_label": self.plane_label,
            "seed": int(self.seed),
        }


def derive_plane_label(section_structures: Sequence[str], annotations: Sequence[Annotation]) -> str:
    """standard iff every essential structure is annotated with flag 1."""
    flags = {a.structure_id: a.flag for a in annotations}
    meets = all(flags.get(s, 0) == 1 for s in section_structures)
    return STANDARD if meets else NON_STANDARD


@dataclass(frozen=True)
class SplitSpec:
    """Train:val:test ratio 3:1:1 under a seeded shuffle."""

    seed: int = 42
    ratios: Tuple[int, int, int] = (3, 1, 1)


def split_sizes(n: int, spec: SplitSpec = SplitSpec()) -> Tuple[int, int, int]:
    total = sum(spec.ratios)
    n_train = spec.ratios[0] * n // total
    n_val = spec.ratios[1] * n // total
    return n_train, n_val, n - n_train - n_val


def split_dataset(samples: Sequence[T], spec: SplitSpec = SplitSpec()) -> Tuple[List[T], List[T], List[T]]:
    """Deterministic shuffled partition with sizes ⌊3n/5⌋ / ⌊n/5⌋ / remainder.

    Raises:
        DataError: If fewer than 5 samples are given
    """
    n = len(samples)
    if n < 5:
        raise DataError(f"At least 5 samples are needed for a 3:1:1 split, got {n}")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train, n_val, _ = split_sizes(n, spec)
    train = [samples[i] for i in order[:n_train]]
    val = [samples[i] for i in order[n_train: n_train + n_val]]
    test = [samples[i] for i in order[n_train + n_val:]]
    return train, val, test


def write_json(path: Union[str, Path], payload) -> None:
    """Deterministic JSON (sorted keys, fixed indent, trailing newline)."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    except OSError as e:
        raise DataError(f"Cannot write {path}: {e}") from e


def read_json(path: Union[str, Path]):
    path = Path(path)
    if not path.exists():
        raise DataError(f"File not found: {path}")
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise DataError(f"Cannot read {path}: {e}") from e


def load_manifest(root: Union[str, Path]) -> pd.DataFrame:
    """Manifest rows as a DataFrame (columns: id, image, annotation, section, plane_label, split)."""
    root = Path(root)
    manifest_path = root / MANIFEST_NAME if root.is_dir() else root
    payload = read_json(manifest_path)
    try:
        frame = pd.DataFrame(payload["samples"])
    except (KeyError, TypeError) as e:
        raise DataError(f"Malformed manifest {manifest_path}: {e}") from e
    required = {"id", "image", "annotation", "section", "plane_label", "split"}
    missing = sorted(required - set(frame.columns))
    if len(frame) and missing:
        raise DataError(f"Manifest {manifest_path} lacks columns {missing}")
    return frame


def load_sample(root: Union[str, Path], row) -> PhantomSample:
    root = Path(root)
    record = read_json(root / row["annotation"])
    try:
        annotations = [Annotation.from_dict(r) for r in record["structures"]]
        return PhantomSample(
            image=read_image(root / record["image"]),
            section=record["section"],
            annotations=annotations,
            plane_label=record["plane_label"],
            seed=int(record["seed"]),
            name=str(row["id"]),
            split=str(row["split"]),
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DataError(f"Malformed annotation {row['annotation']}: {e}") from e


class PhantomDataset:
    """Samples of a generated dataset directory, grouped by split.

    Attributes:
        root: Dataset directory holding the manifest
        frame: Manifest rows
    """

    def __init__(self, root: Union[str, Path], sections: Optional[Sequence[str]] = None):
        self.root = Path(root)
        self.frame = load_manifest(self.root)
        if sections:
            self.frame = self.frame[self.frame["section"].isin(list(sections))].reset_index(drop=True)
        logger.info(f"Loaded manifest with {len(self.frame)} samples from {self.root}")

    @property
    def sections(self) -> List[str]:
        return sorted(self.frame["section"].unique().tolist()) if len(self.frame) else []

    def split(self, name: str) -> List[PhantomSample]:
        """All samples of split ``name`` in manifest order.

        Raises:
            DataError: If the split holds no samples
        """
        if name not in SPLITS:
            raise DataError(f"Unknown split '{name}' (expected one of {SPLITS})")
        rows = self.frame[self.frame["split"] == name] if len(self.frame) else self.frame
        if len(rows) == 0:
            raise DataError(f"Split '{name}' has no samples in {self.root}")
        return [load_sample(self.root, row) for _, row in rows.iterrows()]

    def summary(self) -> pd.DataFrame:
        return self.frame.groupby(["section", "split", "plane_label"]).size().unstack(fill_value=0)
