"""JSON checkpoint format for the MoE language model.

A checkpoint is one JSON document::

    {"config": {...}, "arrays": {name: {"shape": [...], "data": [...]}}}

with row-major float64 data. Python's float repr round-trips exactly, so
save followed by load reproduces every array bit for bit.
"""

import json
from pathlib import Path
from typing import Any, Dict, Union

import torch
from pydantic import ValidationError

from .artifacts import atomic_write_text
from .exceptions import ConfigurationError, InputError, MissingArtifactError
from .logger import logger
from .moe_model import DTYPE, ModelConfig, MoELanguageModel, init_params


def checkpoint_to_dict(model: MoELanguageModel) -> Dict[str, Any]:
    arrays = {
        name: {
            "shape": list(param.shape),
            "data": param.detach().reshape(-1).tolist(),
        }
        for name, param in model.named_parameters()
    }
    return {"config": model.config.model_dump(), "arrays": arrays}


def checkpoint_from_dict(document: Dict[str, Any]) -> MoELanguageModel:
    try:
        config = ModelConfig(**document["config"])
    except (KeyError, ValidationError) as e:
        raise ConfigurationError(f"Invalid checkpoint config: {e}") from e

    model = init_params(config, seed=0)
    arrays = document.get("arrays", {})
    params = dict(model.named_parameters())
    missing = sorted(set(params) - set(arrays))
    if missing:
        raise InputError(f"Checkpoint is missing arrays: {', '.join(missing)}")

    with torch.no_grad():
        for name, param in params.items():
            entry = arrays[name]
            if list(entry["shape"]) != list(param.shape):
                raise InputError(
                    f"Array {name} has shape {entry['shape']}, "
                    f"expected {list(param.shape)}"
                )
            values = torch.tensor(entry["data"], dtype=DTYPE).reshape(param.shape)
            if not bool(torch.isfinite(values).all()):
                raise InputError(f"Array {name} contains non-finite values")
            param.copy_(values)
    return model


def save_checkpoint(model: MoELanguageModel, path: Union[str, Path]) -> Path:
    path = atomic_write_text(path, json.dumps(checkpoint_to_dict(model)))
    logger.info(f"Saved checkpoint to {path}")
    return path


def load_checkpoint(path: Union[str, Path]) -> MoELanguageModel:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(str(path))
    try:
        document = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise InputError(f"Checkpoint {path} is not valid JSON: {e}") from e
    return checkpoint_from_dict(document)
