import json

from main import build_parser, main, resolve_config
from src.config import Method


class TestMain:
    def test_flops_stage_exits_cleanly(self, tmp_path):
        exit_code = main(["--stage", "flops", "--out", str(tmp_path)])

        assert exit_code == 0
        assert (tmp_path / "flops" / "flops.json").exists()

    def test_missing_upstream_artifact_exits_with_error(self, tmp_path):
        exit_code = main(["--stage", "finetune", "--out", str(tmp_path)])

        assert exit_code == 1
        assert not (tmp_path / "finetune").exists()

    def test_write_config_then_reload(self, tmp_path):
        # Arrange
        assert main(["--stage", "write-config", "--seed", "5", "--out", str(tmp_path)]) == 0

        # Act
        args = build_parser().parse_args(
            ["--config", str(tmp_path / "config.json"), "--method", "sft"]
        )
        config = resolve_config(args)

        # Assert
        assert json.loads((tmp_path / "config.json").read_text())["train"]["seed"] == 5
        assert config.train.seed == 5
        assert config.method is Method.SFT
        assert config.resolved_run_name == "sft-tgt1-s5"

    def test_repeated_runs_select_report_inputs(self):
        args = build_parser().parse_args(["--run", "a", "--run", "b", "--seed", "1"])

        config = resolve_config(args)

        assert config.report_runs == ["a", "b"]
        assert config.run_name is None

    def test_invalid_override_exits_with_error(self, tmp_path):
        assert main(["--stage", "flops", "--k-experts", "0", "--out", str(tmp_path)]) == 1
