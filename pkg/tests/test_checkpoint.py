import json

import pytest
import torch

from src.checkpoint import load_checkpoint, save_checkpoint
from src.exceptions import ConfigurationError, InputError, MissingArtifactError
from src.moe_model import attach_adapters


class TestCheckpointRoundTrip:
    def test_arrays_round_trip_bit_for_bit(self, tiny_model, tmp_path):
        # Act
        path = save_checkpoint(tiny_model, tmp_path / "model.json")
        loaded = load_checkpoint(path)

        # Assert
        assert loaded.config == tiny_model.config
        original = dict(tiny_model.named_parameters())
        for name, param in loaded.named_parameters():
            assert torch.equal(param, original[name]), name

    def test_adapter_checkpoint_keeps_trainable_set(self, tiny_model, tmp_path):
        adapted = attach_adapters(tiny_model, rank=2, seed=3)

        loaded = load_checkpoint(save_checkpoint(adapted, tmp_path / "adapted.json"))

        trainable = [n for n, p in loaded.named_parameters() if p.requires_grad]
        assert trainable == adapted.adapter_parameter_names()

    def test_save_leaves_no_temporary_files(self, tiny_model, tmp_path):
        # Arrange
        target = tmp_path / "nested" / "model.json"
        target.parent.mkdir()
        target.write_text("stale")

        # Act
        save_checkpoint(tiny_model, target)

        # Assert
        assert [p.name for p in target.parent.iterdir()] == ["model.json"]
        assert load_checkpoint(target).config == tiny_model.config

    def test_failed_save_keeps_previous_checkpoint(self, tiny_model, tmp_path, monkeypatch):
        # Arrange
        target = save_checkpoint(tiny_model, tmp_path / "model.json")
        before = target.read_text()

        def failing_replace(src, dst):
            raise OSError("disk full")

        monkeypatch.setattr("src.artifacts.os.replace", failing_replace)

        # Act
        with pytest.raises(OSError):
            save_checkpoint(tiny_model, target)

        # Assert
        assert target.read_text() == before
        assert [p.name for p in tmp_path.iterdir()] == ["model.json"]


class TestCheckpointErrors:
    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_checkpoint(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{not json")

        with pytest.raises(InputError):
            load_checkpoint(path)

    def test_invalid_config(self, tiny_model, tmp_path):
        # Arrange
        path = save_checkpoint(tiny_model, tmp_path / "model.json")
        document = json.loads(path.read_text())
        document["config"]["top_k"] = 99
        path.write_text(json.dumps(document))

        # Act / Assert
        with pytest.raises(ConfigurationError):
            load_checkpoint(path)

    def test_wrong_shape(self, tiny_model, tmp_path):
        path = save_checkpoint(tiny_model, tmp_path / "model.json")
        document = json.loads(path.read_text())
        document["arrays"]["head"]["shape"] = [1, 1]
        path.write_text(json.dumps(document))

        with pytest.raises(InputError):
            load_checkpoint(path)

    def test_missing_array(self, tiny_model, tmp_path):
        path = save_checkpoint(tiny_model, tmp_path / "model.json")
        document = json.loads(path.read_text())
        del document["arrays"]["tok_emb"]
        path.write_text(json.dumps(document))

        with pytest.raises(InputError, match="tok_emb"):
            load_checkpoint(path)
