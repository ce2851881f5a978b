"""On-disk artifacts: JSON/JSONL IO, hashing and stage manifests."""

import hashlib
import json
import os
import shutil
import tempfile
from pathlib import Path
from typing import (
    Any,
    Dict,
    Iterable,
    List,
    Mapping,
    Optional,
    Sequence,
    Tuple,
    Type,
    TypeVar,
    Union,
)

from pydantic import BaseModel

from .exceptions import ConfigMismatchError, MissingArtifactError
from .logger import logger

ModelT = TypeVar("ModelT", bound=BaseModel)
PathLike = Union[str, Path]

MANIFEST_NAME = "manifest.json"


def _dumps(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def atomic_write_text(path: PathLike, text: str) -> Path:
    """Write through a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".tmp_{path.name}_")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as handle:
            handle.write(text)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_json(path: PathLike, data: Any) -> Path:
    return atomic_write_text(path, _dumps(data))


def read_json(path: PathLike) -> Any:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path))
    return json.loads(path.read_text(encoding="utf-8"))


def write_jsonl(path: PathLike, records: Iterable[Union[BaseModel, Mapping[str, Any]]]) -> Path:
    lines = []
    for record in records:
        if isinstance(record, BaseModel):
            lines.append(record.model_dump_json())
        else:
            lines.append(json.dumps(record, sort_keys=True))
    return atomic_write_text(path, "".join(line + "\n" for line in lines))


def read_jsonl(path: PathLike, model: Optional[Type[ModelT]] = None) -> List[Any]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path))
    records = []
    with path.open(encoding="utf-8") as handle:
        for line in handle:
            if not line.strip():
                continue
            records.append(model.model_validate_json(line) if model else json.loads(line))
    return records


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with Path(path).open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def hash_config(config: Any) -> str:
    """Stable hash of a JSON-serializable configuration."""
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class Manifest(BaseModel):
    """What a stage consumed and produced, content-addressed by sha256."""

    stage: str
    config_hash: str
    inputs: Dict[str, str]
    outputs: Dict[str, str]


class StageDirectory:
    """A stage output directory that is written once and never modified.

    Outputs are built in a sibling ``.partial`` directory and renamed into
    place together with the manifest. An existing directory whose manifest
    matches the requested config and inputs is reused as is; any other
    existing directory is refused.
    """

    def __init__(
        self,
        root: Path,
        path: Path,
        stage: str,
        config: Any,
        inputs: Sequence[Tuple[Path, str]],
    ):
        self.root = Path(root)
        self.path = Path(path)
        self.stage = stage
        self.config_hash = hash_config(config)
        self.input_paths = list(inputs)
        self.partial = self.path.with_name(self.path.name + ".partial")

    def _relative(self, path: Path) -> str:
        try:
            return Path(path).resolve().relative_to(self.root.resolve()).as_posix()
        except ValueError:
            return Path(path).as_posix()

    def input_hashes(self) -> Dict[str, str]:
        hashes = {}
        for path, upstream_stage in self.input_paths:
            if not Path(path).exists():
                raise MissingArtifactError(str(path), upstream_stage)
            hashes[self._relative(path)] = sha256_file(path)
        return dict(sorted(hashes.items()))

    def is_complete(self) -> bool:
        """True when an identical earlier run already produced this directory."""
        inputs = self.input_hashes()
        if not self.path.exists():
            return False
        manifest_path = self.path / MANIFEST_NAME
        if not manifest_path.exists():
            raise ConfigMismatchError(
                f"{self.path} exists without a manifest; it was not produced by a "
                f"completed '{self.stage}' stage. Remove it or choose another --out."
            )
        existing = Manifest(**read_json(manifest_path))
        if existing.config_hash != self.config_hash:
            raise ConfigMismatchError(
                f"{self.path} was produced with config hash {existing.config_hash[:12]}, "
                f"requested {self.config_hash[:12]}. Refusing to overwrite; use a new --out."
            )
        if existing.inputs != inputs:
            changed = sorted(
                set(existing.inputs.items()).symmetric_difference(inputs.items())
            )
            raise ConfigMismatchError(
                f"{self.path} was produced from different inputs "
                f"({', '.join(name for name, _ in changed)}). Refusing to overwrite."
            )
        logger.warning(f"Stage '{self.stage}' already complete at {self.path}; reusing")
        return True

    def begin(self) -> Path:
        if self.partial.exists():
            shutil.rmtree(self.partial)
        self.partial.mkdir(parents=True)
        return self.partial

    def finalize(self) -> Manifest:
        outputs = {
            p.relative_to(self.partial).as_posix(): sha256_file(p)
            for p in sorted(self.partial.rglob("*"))
            if p.is_file()
        }
        manifest = Manifest(
            stage=self.stage,
            config_hash=self.config_hash,
            inputs=self.input_hashes(),
            outputs=outputs,
        )
        write_json(self.partial / MANIFEST_NAME, manifest.model_dump())
        self.partial.rename(self.path)
        return manifest
