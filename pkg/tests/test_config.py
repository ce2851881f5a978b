import json

import pytest

from src.config import (
    Ablation,
    Method,
    PipelineConfig,
    Settings,
    Stage,
    apply_overrides,
    load_pipeline_config,
    save_pipeline_config,
)
from src.exceptions import ConfigurationError
from src.taxonomy import Judge


class TestSettings:
    def test_defaults(self, monkeypatch):
        monkeypatch.delenv("RA_MOE_LOG_LEVEL", raising=False)
        monkeypatch.delenv("RA_MOE_DEFAULT_SEED", raising=False)

        settings = Settings(_env_file=None)

        assert settings.log_level == "INFO"
        assert settings.default_seed == 42
        assert settings.torch_num_threads == 1

    def test_environment_overrides(self, monkeypatch):
        monkeypatch.setenv("RA_MOE_LOG_LEVEL", "DEBUG")
        monkeypatch.setenv("RA_MOE_RUNS_DIR", "/tmp/elsewhere")

        settings = Settings(_env_file=None)

        assert settings.log_level == "DEBUG"
        assert settings.runs_dir == "/tmp/elsewhere"


class TestPipelineConfig:
    def test_defaults_follow_the_reference_recipe(self):
        config = PipelineConfig()

        assert config.train.lambda_align == 1.0
        assert config.train.k_experts == 8
        assert config.train.warmup_ratio == 0.03
        assert config.threshold_percentile == 50.0
        assert config.stages[0] is Stage.GEN_DATA
        assert "train.adapter_rank" in config.notes

    def test_file_round_trip(self, tmp_path):
        # Arrange
        config = apply_overrides(PipelineConfig(), seed=7, lambda_align=0.5)

        # Act
        path = save_pipeline_config(config, tmp_path / "config.json")
        loaded = load_pipeline_config(path)

        # Assert
        assert loaded == config
        assert "_notes" in json.loads(path.read_text())

    def test_unknown_key_is_rejected(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"not_a_setting": 1}))

        with pytest.raises(ConfigurationError):
            load_pipeline_config(path)

    def test_invalid_value_is_rejected(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text(json.dumps({"train": {"epsilon_kl": 0.5}}))

        with pytest.raises(ConfigurationError):
            load_pipeline_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigurationError):
            load_pipeline_config(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{")

        with pytest.raises(ConfigurationError):
            load_pipeline_config(path)


class TestOverrides:
    def test_seed_applies_to_every_stage(self):
        config = apply_overrides(PipelineConfig(), seed=11)

        assert (config.corpus.seed, config.pretrain.seed, config.train.seed) == (11, 11, 11)

    def test_ablations_set_their_flags(self):
        config = apply_overrides(
            PipelineConfig(), ablations=[Ablation.NO_CI_FILTER, Ablation.ALL_LAYERS]
        )

        assert config.train.no_ci_filter and config.train.all_layers
        assert not config.train.no_align
        assert config.default_run_name() == "ra-moe-tgt1-s0-no-ci-filter-all-layers"

    def test_sft_method_switches_alignment_off(self):
        config = apply_overrides(PipelineConfig(), method=Method.SFT, seed=3)

        assert config.train.no_align
        assert not config.train.aligns
        assert config.resolved_run_name == "sft-tgt1-s3"

    def test_explicit_run_name_wins(self):
        config = apply_overrides(PipelineConfig(), run_name="custom", judge=Judge.PPL)

        assert config.resolved_run_name == "custom"
        assert config.judge is Judge.PPL

    def test_invalid_override_raises(self):
        with pytest.raises(ConfigurationError):
            apply_overrides(PipelineConfig(), k_experts=0)

    def test_negative_lambda_raises(self):
        with pytest.raises(ConfigurationError):
            apply_overrides(PipelineConfig(), lambda_align=-1.0)
