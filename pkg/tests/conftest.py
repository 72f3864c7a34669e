"""
Shared fixtures: a tiny float64 configuration, networks built from it, and
small phantom datasets written to temporary directories.
"""

import sys
from pathlib import Path

import numpy as np
import pytest
import yaml

sys.path.insert(0, str(Path(__file__).resolve().parent.parent))

from data.phantom import DegradeParams, generate_dataset, generate_sample  # noqa: E402
from models.config import load_config  # noqa: E402
from models.network import QualityNet  # noqa: E402

TINY_OVERRIDES = {
    "random_seed": 7,
    "backbone": {"channel_scale": 64, "dtype": "float64"},
    "relation": {"d_k": 8, "d_g": 16, "d_f": 16},
    "detector": {"fpn_channels": 8, "top_k": 20},
    "classifier": {"roi_spp_levels": [1, 2]},
    "trainer": {
        "epochs": 2,
        "batch_size": 2,
        "learning_rate": 0.01,
        "rois_per_image": 8,
        "proposals_per_image": 8,
    },
    "phantom": {
        "image_size": 64,
        "counts": {"head": 5},
        "speckle_strength": 0.1,
        "shadow_count": 1,
        "shadow_opacity": 0.3,
        "max_rotation": 10.0,
    },
    "logging": {"level": "WARNING"},
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return load_config(overrides=TINY_OVERRIDES)


@pytest.fixture
def tiny_net(tiny_config):
    return QualityNet(tiny_config, seed=0, sections=("head",))


@pytest.fixture
def head_sample():
    return generate_sample("head", standard=True, params=DegradeParams(), seed=3, image_size=64)


@pytest.fixture(scope="session")
def phantom_dir(tmp_path_factory):
    config = load_config(overrides=TINY_OVERRIDES)
    out = tmp_path_factory.mktemp("phantoms")
    generate_dataset(config.phantom, config.random_seed, out)
    return out


@pytest.fixture(scope="session")
def tiny_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("config") / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY_OVERRIDES))
    return path
