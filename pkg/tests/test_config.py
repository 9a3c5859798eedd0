"""
Tests for run configuration, overrides and process settings.
"""

from pathlib import Path

import pytest
import yaml
from pydantic import ValidationError

from app.config import Settings
from app.core.errors import ConfigurationError
from app.main import apply_overrides, load_run_config, resolve_encoder_config, variant_config
from app.models.config import (
    AugmentConfig,
    DataConfig,
    EncoderConfig,
    ModelConfig,
    Protocol,
    RunConfig,
    Stage2Config,
    default_protocol,
)
from tests.conftest import TINY_ENCODER

DESK_CONFIG = Path(__file__).resolve().parent.parent / "configs" / "desk.yaml"


class TestRunConfig:
    """Validation of the RunConfig tree."""

    def test_defaults_are_valid(self):
        config = RunConfig()
        assert config.encoder.num_patches == 32
        assert config.stage2.batch_size == 64

    def test_unknown_key_rejected(self):
        with pytest.raises(ValidationError):
            RunConfig.model_validate({"stage2": {"epochz": 3}})

    def test_text_length_must_hold_prompt(self):
        with pytest.raises(ValidationError, match="max_text_len"):
            RunConfig(encoder=EncoderConfig(max_text_len=8), model=ModelConfig(num_prompt_tokens=4))

    def test_patch_count_must_split_into_four(self):
        # 24 x 24 with 8 x 8 patches -> 9 patches
        encoder = EncoderConfig(image_height=24, image_width=24)
        with pytest.raises(ValidationError, match="divisible by 4"):
            RunConfig(encoder=encoder)
        assert RunConfig(encoder=encoder, model=ModelConfig(use_dhp=False)).encoder.num_patches == 9

    def test_stride_must_tile(self):
        with pytest.raises(ValidationError):
            EncoderConfig(image_height=30, patch_size=8, patch_stride=8)

    def test_overlapping_patches(self):
        config = EncoderConfig(image_height=64, image_width=28, patch_size=16, patch_stride=12)
        assert config.grid_size == (5, 2)

    def test_data_source_requirements(self):
        with pytest.raises(ValidationError):
            DataConfig(source="manifest")
        with pytest.raises(ValidationError):
            DataConfig(source="directory", root="/data")
        assert DataConfig(source="directory", root="/data", layout="prcc_like").layout == "prcc_like"

    def test_milestones_must_increase(self):
        with pytest.raises(ValidationError):
            Stage2Config(milestones=[50, 30])

    def test_erase_area_bounds(self):
        with pytest.raises(ValidationError):
            AugmentConfig(erase_area=(0.4, 0.2))
        with pytest.raises(ValidationError):
            AugmentConfig(erase_area=(0.0, 0.5))

    @pytest.mark.parametrize(
        "layout, expected",
        [
            ("ltcc_like", Protocol(mode="cloth_changing", exclude_same_camera=True)),
            ("prcc_like", Protocol(mode="cloth_changing")),
            ("celeb_like", Protocol(mode="standard")),
            (None, Protocol(mode="cloth_changing")),
        ],
    )
    def test_default_protocol(self, layout, expected):
        assert default_protocol(layout) == expected

    def test_protocol_name(self):
        assert Protocol(mode="standard", exclude_same_camera=True).name == "standard+cross_camera"


# ----------------------------------------------------------------------------
# Loading and overrides
# ----------------------------------------------------------------------------


class TestLoading:
    def test_desk_config_loads(self):
        config = load_run_config(str(DESK_CONFIG))
        assert config.data.synthetic.num_identities == 10
        assert config.encoder.num_patches == 32
        assert config.ablation.variants == ["baseline", "full"]

    def test_overrides_parse_yaml_scalars(self):
        data = apply_overrides({"stage2": {"epochs": 5}}, ["stage2.epochs=7", "stage2.milestones=[2, 4]", "model.use_bga=false"])
        assert data == {"stage2": {"epochs": 7, "milestones": [2, 4]}, "model": {"use_bga": False}}

    def test_malformed_override(self):
        with pytest.raises(ConfigurationError):
            apply_overrides({}, ["stage2.epochs"])

    def test_override_into_scalar(self):
        with pytest.raises(ConfigurationError):
            apply_overrides({"seed": 3}, ["seed.value=1"])

    def test_flags_beat_file(self, tmp_path):
        path = tmp_path / "run.yaml"
        path.write_text(yaml.safe_dump({"seed": 1, "stage1": {"epochs": 3}}))
        config = load_run_config(str(path), ["stage1.epochs=4"], seed=9, output_dir=str(tmp_path / "out"))
        assert (config.seed, config.stage1.epochs) == (9, 4)
        assert config.output_dir == str(tmp_path / "out")

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_run_config(str(tmp_path / "absent.yaml"))

    def test_non_mapping_file(self, tmp_path):
        path = tmp_path / "list.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ConfigurationError):
            load_run_config(str(path))

    def test_label_spaces_must_agree(self):
        encoder = EncoderConfig(**TINY_ENCODER, num_identities=5)
        with pytest.raises(ConfigurationError):
            resolve_encoder_config(encoder, 4, 8)
        resolved = resolve_encoder_config(EncoderConfig(**TINY_ENCODER), 4, 8)
        assert (resolved.num_identities, resolved.num_clothes) == (4, 8)

    def test_variant_switches(self):
        config = variant_config(RunConfig(), "cis+bga", seed=3)
        assert (config.model.use_cis, config.model.use_bga, config.model.use_dhp) == (True, True, False)
        assert config.seed == 3
        with pytest.raises(ConfigurationError):
            variant_config(RunConfig(), "dhp+bga", seed=0)


class TestSettings:
    def test_registry_defaults_under_output_root(self, tmp_path):
        settings = Settings(output_root=str(tmp_path))
        assert settings.registry_url == f"sqlite:///{tmp_path / 'runs.db'}"

    def test_explicit_database_url(self):
        assert Settings(database_url="sqlite:///:memory:").registry_url == "sqlite:///:memory:"

    def test_environment_prefix(self, monkeypatch):
        monkeypatch.setenv("PROMPTREID_LOG_LEVEL", "DEBUG")
        assert Settings().log_level == "DEBUG"
