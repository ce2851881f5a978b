import json

import pytest

from src.artifacts import (
    MANIFEST_NAME,
    StageDirectory,
    atomic_write_text,
    hash_config,
    read_json,
    read_jsonl,
    sha256_file,
    write_jsonl,
)
from src.exceptions import ConfigMismatchError, MissingArtifactError
from src.synth_lang import TextSample


def _complete(root, path, config, inputs=()):
    directory = StageDirectory(root, path, "demo", config, list(inputs))
    if directory.is_complete():
        return directory, False
    work = directory.begin()
    (work / "out.txt").write_text("done")
    directory.finalize()
    return directory, True


class TestFiles:
    def test_atomic_write_leaves_no_temporaries(self, tmp_path):
        path = atomic_write_text(tmp_path / "nested" / "a.txt", "hello")

        assert path.read_text() == "hello"
        assert [p.name for p in path.parent.iterdir()] == ["a.txt"]

    def test_jsonl_round_trip_with_model(self, tmp_path):
        samples = [
            TextSample(lang="src", tokens=[12, 13, 31]),
            TextSample(lang="tgt1", tokens=[20]),
        ]

        path = write_jsonl(tmp_path / "s.jsonl", samples)

        assert read_jsonl(path, TextSample) == samples

    def test_missing_files_raise(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            read_json(tmp_path / "absent.json")
        with pytest.raises(MissingArtifactError):
            read_jsonl(tmp_path / "absent.jsonl")

    def test_config_hash_ignores_key_order(self):
        assert hash_config({"a": 1, "b": [1, 2]}) == hash_config({"b": [1, 2], "a": 1})
        assert hash_config({"a": 1}) != hash_config({"a": 2})


class TestStageDirectory:
    def test_manifest_records_inputs_and_outputs(self, tmp_path):
        # Arrange
        upstream = tmp_path / "corpus" / "data.txt"
        upstream.parent.mkdir()
        upstream.write_text("tokens")

        # Act
        _, built = _complete(tmp_path, tmp_path / "stage", {"k": 1}, [(upstream, "gen-data")])

        # Assert
        manifest = json.loads((tmp_path / "stage" / MANIFEST_NAME).read_text())
        assert built
        assert manifest["stage"] == "demo"
        assert manifest["inputs"] == {"corpus/data.txt": sha256_file(upstream)}
        assert list(manifest["outputs"]) == ["out.txt"]
        assert not (tmp_path / "stage.partial").exists()

    def test_identical_rerun_is_reused(self, tmp_path):
        _complete(tmp_path, tmp_path / "stage", {"k": 1})
        before = (tmp_path / "stage" / MANIFEST_NAME).read_bytes()

        _, built = _complete(tmp_path, tmp_path / "stage", {"k": 1})

        assert not built
        assert (tmp_path / "stage" / MANIFEST_NAME).read_bytes() == before

    def test_different_config_is_refused(self, tmp_path):
        _complete(tmp_path, tmp_path / "stage", {"k": 1})

        with pytest.raises(ConfigMismatchError):
            _complete(tmp_path, tmp_path / "stage", {"k": 2})

    def test_changed_input_is_refused(self, tmp_path):
        upstream = tmp_path / "input.txt"
        upstream.write_text("v1")
        _complete(tmp_path, tmp_path / "stage", {}, [(upstream, "gen-data")])
        upstream.write_text("v2")

        with pytest.raises(ConfigMismatchError):
            _complete(tmp_path, tmp_path / "stage", {}, [(upstream, "gen-data")])

    def test_directory_without_manifest_is_refused(self, tmp_path):
        (tmp_path / "stage").mkdir()

        with pytest.raises(ConfigMismatchError):
            _complete(tmp_path, tmp_path / "stage", {})

    def test_missing_input_names_upstream_stage(self, tmp_path):
        with pytest.raises(MissingArtifactError) as exc_info:
            _complete(tmp_path, tmp_path / "stage", {}, [(tmp_path / "nope.json", "profile")])

        assert exc_info.value.stage == "profile"
        assert "nope.json" in str(exc_info.value)

    def test_stale_partial_directory_is_replaced(self, tmp_path):
        stale = tmp_path / "stage.partial"
        stale.mkdir()
        (stale / "leftover.txt").write_text("old")

        _complete(tmp_path, tmp_path / "stage", {})

        assert not (tmp_path / "stage" / "leftover.txt").exists()
        assert (tmp_path / "stage" / "out.txt").exists()
