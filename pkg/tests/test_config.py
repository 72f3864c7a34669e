"""
Tests for configuration resolution: defaults, files, overrides and type
checks on individual keys.
"""

import pytest

from models.config import load_config
from models.errors import ConfigError


class TestLoadConfig:
    def test_defaults(self):
        config = load_config()
        assert config.trainer.rois_per_image == 32
        assert config.preprocess.radius is None

    def test_file_then_overrides(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text("trainer:\n  epochs: 3\n  batch_size: 2\n")
        config = load_config(path, overrides={"trainer": {"epochs": 5}})
        assert config.trainer.epochs == 5
        assert config.trainer.batch_size == 2

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"trainer": {"epochz": 3}})


class TestIntegerKeys:
    def test_fractional_value_rejected(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"trainer": {"rois_per_image": 32.5}})

    def test_fractional_optional_value_rejected(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"preprocess": {"radius": 2.5}})

    def test_integral_float_becomes_int(self):
        config = load_config(overrides={"trainer": {"rois_per_image": 16.0}})
        assert config.trainer.rois_per_image == 16
        assert isinstance(config.trainer.rois_per_image, int)

    def test_boolean_rejected(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"trainer": {"epochs": True}})

    def test_float_key_accepts_fraction(self):
        assert load_config(overrides={"backbone": {"channel_scale": 32.0}}).backbone.channel_scale == 32.0
