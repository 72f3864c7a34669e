"""
Tests for the phantom generator: rendering, degradations, ground truth and
dataset files.
"""

import json

import numpy as np
import pytest
from numpy.testing import assert_array_equal
from scipy.spatial import ConvexHull

from data.dataset import (
    MANIFEST_NAME,
    NON_STANDARD,
    STANDARD,
    PhantomDataset,
    derive_plane_label,
    load_manifest,
    read_json,
)
from data.image_io import GrayImage
from data.phantom import (
    SECTION_LAYOUTS,
    DegradeParams,
    PhantomGenerator,
    degrade,
    generate_dataset,
    generate_sample,
    mask_box,
    rasterize,
    rotate_boxes,
)
from models.classifier import SECTION_STRUCTURES
from models.config import PhantomConfig
from models.errors import DataError, ParameterError


def _hull_area(mask: np.ndarray) -> float:
    rows, cols = np.nonzero(mask)
    corners = np.concatenate(
        [
            np.stack([cols, rows], axis=1),
            np.stack([cols + 1, rows], axis=1),
            np.stack([cols, rows + 1], axis=1),
            np.stack([cols + 1, rows + 1], axis=1),
        ]
    )
    return float(ConvexHull(corners).volume)


class TestGenerateSample:
    def test_standard_head(self):
        sample = generate_sample("head", standard=True, params=DegradeParams(), seed=11)
        assert len(sample.annotations) == 6
        assert all(a.flag == 1 for a in sample.annotations)
        assert sample.plane_label == STANDARD
        assert sample.structure_ids == list(SECTION_STRUCTURES["head"])

    def test_abdominal_without_umbilical_vein(self):
        for seed in range(6):
            sample = generate_sample("abdominal", False, DegradeParams(dropout=("UV",)), seed=seed)
            uv = [a for a in sample.annotations if a.structure_id == "UV"]
            assert not uv or uv[0].flag == 0
            assert sample.plane_label == NON_STANDARD

    @pytest.mark.parametrize("section", list(SECTION_LAYOUTS))
    def test_non_standard_without_explicit_dropout(self, section):
        sample = generate_sample(section, standard=False, params=DegradeParams(), seed=5)
        assert sample.plane_label == NON_STANDARD

    def test_deterministic(self):
        params = DegradeParams(speckle_strength=0.3, shadow_count=2, shadow_opacity=0.4, rotation=12.0)
        a = generate_sample("heart", True, params, seed=9)
        b = generate_sample("heart", True, params, seed=9)
        assert_array_equal(a.image.pixels, b.image.pixels)
        assert a.annotations == b.annotations

    def test_unknown_dropout_structure(self):
        with pytest.raises(ParameterError):
            generate_sample("head", False, DegradeParams(dropout=("DAO",)), seed=0)

    @pytest.mark.parametrize("section", list(SECTION_LAYOUTS))
    def test_boxes_tightly_bound_rendered_support(self, section):
        for seed in range(5):
            sample = generate_sample(section, standard=True, params=DegradeParams(), seed=seed)
            for a in sample.annotations:
                mask = sample.masks[a.structure_id]
                x0, y0, x1, y1 = (int(v) for v in a.box)
                rows, cols = np.nonzero(mask)
                assert rows.min() >= y0 and rows.max() < y1
                assert cols.min() >= x0 and cols.max() < x1
                assert (x1 - x0) * (y1 - y0) <= 1.5 * _hull_area(mask)

    @pytest.mark.parametrize("section", list(SECTION_LAYOUTS))
    def test_plane_label_rederivable(self, section):
        for seed in range(8):
            params = DegradeParams(speckle_strength=0.2, rotation=-20.0)
            sample = generate_sample(section, standard=seed % 2 == 0, params=params, seed=seed)
            assert sample.plane_label == derive_plane_label(SECTION_STRUCTURES[section], sample.annotations)
            for a in sample.annotations:
                x0, y0, x1, y1 = a.box
                assert 0 <= x0 < x1 <= 128 and 0 <= y0 < y1 <= 128

    @pytest.mark.parametrize("section", ["head", "abdominal"])
    def test_confusable_pairs_co_rendered(self, section):
        hits = sum(
            generate_sample(section, True, DegradeParams(), seed=seed, image_size=64).has_distractor
            for seed in range(100)
        )
        assert hits >= 20

    def test_overlay_text_in_margin(self):
        sample = generate_sample("head", True, DegradeParams(), seed=2)
        assert sample.image.pixels[:8, :48].max() == 1.0


class TestDegrade:
    def test_zero_params_unchanged(self, rng):
        image = GrayImage(rng.uniform(size=(32, 32)))
        boxes = np.array([[2.0, 3.0, 10.0, 20.0]])
        out, out_boxes = degrade(image, DegradeParams(), seed=0, boxes=boxes)
        assert_array_equal(out.pixels, image.pixels)
        assert_array_equal(out_boxes, boxes)

    def test_zero_rotation_keeps_boxes(self, rng):
        image = GrayImage(rng.uniform(size=(32, 32)))
        boxes = np.array([[2.0, 3.0, 10.0, 20.0]])
        _, out_boxes = degrade(image, DegradeParams(speckle_strength=0.3), seed=0, boxes=boxes)
        assert_array_equal(out_boxes, boxes)

    def test_quarter_turn_swaps_extents(self):
        boxes = np.array([[40.0, 50.0, 60.0, 90.0]])
        rotated = rotate_boxes(boxes, 90.0, 128, 128)[0]
        assert rotated[2] - rotated[0] == pytest.approx(40.0)
        assert rotated[3] - rotated[1] == pytest.approx(20.0)

    def test_rotated_sample_boxes_follow_rotated_masks(self):
        sample = generate_sample("head", True, DegradeParams(rotation=30.0), seed=4)
        upright = generate_sample("head", True, DegradeParams(), seed=4)
        bm = next(a for a in sample.annotations if a.structure_id == "BM")
        flat = next(a for a in upright.annotations if a.structure_id == "BM")
        assert mask_box(sample.masks["BM"]) == bm.box
        # a horizontal line turned by 30 degrees gets taller
        assert bm.box[3] - bm.box[1] > 2 * (flat.box[3] - flat.box[1])

    def test_speckle_keeps_range_and_mean(self):
        image = GrayImage(np.full((64, 64), 0.4))
        out, _ = degrade(image, DegradeParams(speckle_strength=0.2), seed=1)
        assert out.pixels.min() >= 0 and out.pixels.max() <= 1
        assert abs(out.pixels.mean() - 0.4) < 0.02

    def test_shadows_only_darken(self, rng):
        image = GrayImage(rng.uniform(0.2, 0.8, size=(64, 64)))
        out, _ = degrade(image, DegradeParams(shadow_count=3, shadow_opacity=0.5), seed=3)
        assert np.all(out.pixels <= image.pixels + 1e-12)
        assert np.any(out.pixels < image.pixels)

    @pytest.mark.parametrize(
        "kwargs",
        [{"speckle_strength": 1.5}, {"shadow_opacity": -0.1}, {"rotation": 50.0}, {"shadow_count": -1}],
    )
    def test_invalid_params(self, kwargs):
        with pytest.raises(ParameterError):
            DegradeParams(**kwargs)


class TestPrimitives:
    def test_ellipse_area(self):
        primitive = SECTION_LAYOUTS["heart"][0][1]
        mask = rasterize(primitive, 256)
        expected = np.pi * primitive.a * primitive.b * 256 ** 2
        assert abs(mask.sum() - expected) / expected < 0.05

    def test_mask_box_edges(self):
        mask = np.zeros((10, 10), dtype=bool)
        mask[2:5, 3:8] = True
        assert mask_box(mask) == (3.0, 2.0, 8.0, 5.0)
        assert mask_box(np.zeros((4, 4), dtype=bool)) is None


class TestGenerateDataset:
    def test_counts_and_files(self, tmp_path):
        config = PhantomConfig(image_size=64, counts={"head": 10}, standard_ratio=0.5)
        manifest = generate_dataset(config, seed=7, out_dir=tmp_path)
        assert len(manifest["samples"]) == 10
        assert len(list((tmp_path / "images").glob("*.png"))) == 10
        assert len(list((tmp_path / "annotations").glob("*.json"))) == 10
        assert (tmp_path / MANIFEST_NAME).exists()
        labels = [e["plane_label"] for e in manifest["samples"]]
        assert labels.count(STANDARD) == 5
        splits = [e["split"] for e in manifest["samples"]]
        assert (splits.count("train"), splits.count("val"), splits.count("test")) == (6, 2, 2)

    def test_annotation_schema(self, phantom_dir):
        manifest = read_json(phantom_dir / MANIFEST_NAME)
        record = read_json(phantom_dir / manifest["samples"][0]["annotation"])
        assert set(record) == {"image", "section", "structures", "plane_label", "seed"}
        for structure in record["structures"]:
            assert set(structure) == {"class", "box", "flag"}
            assert len(structure["box"]) == 4

    def test_rerun_reproduces_annotations(self, tmp_path):
        config = PhantomConfig(image_size=64, counts={"heart": 5})
        generate_dataset(config, seed=3, out_dir=tmp_path / "a")
        generate_dataset(config, seed=3, out_dir=tmp_path / "b")
        for path in sorted((tmp_path / "a" / "annotations").glob("*.json")):
            assert path.read_bytes() == (tmp_path / "b" / "annotations" / path.name).read_bytes()
        assert (tmp_path / "a" / MANIFEST_NAME).read_bytes() == (tmp_path / "b" / MANIFEST_NAME).read_bytes()

    def test_parallel_matches_sequential(self, tmp_path):
        base = PhantomConfig(image_size=64, counts={"head": 6})
        parallel = PhantomConfig(image_size=64, counts={"head": 6}, n_jobs=2)
        generate_dataset(base, seed=1, out_dir=tmp_path / "seq")
        generate_dataset(parallel, seed=1, out_dir=tmp_path / "par")
        for path in sorted((tmp_path / "seq" / "annotations").glob("*.json")):
            twin = tmp_path / "par" / "annotations" / path.name
            assert json.loads(path.read_text()) == json.loads(twin.read_text())

    def test_dataset_loads_back(self, phantom_dir):
        dataset = PhantomDataset(phantom_dir)
        assert dataset.sections == ["head"]
        test = dataset.split("test")
        assert len(test) == 1
        sample = test[0]
        assert sample.image.pixels.shape == (64, 64)
        assert sample.plane_label == derive_plane_label(SECTION_STRUCTURES["head"], sample.annotations)
        assert len(load_manifest(phantom_dir)) == 5

    def test_too_few_samples(self):
        with pytest.raises(ParameterError):
            PhantomGenerator(PhantomConfig(counts={"head": 4}))

    def test_unwritable_directory(self, tmp_path):
        blocker = tmp_path / "file"
        blocker.write_text("x")
        with pytest.raises(DataError):
            generate_dataset(PhantomConfig(image_size=64, counts={"head": 5}), seed=0, out_dir=blocker / "sub")
