"""Configuration: environment settings and the pipeline configuration document."""

import json
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from .align_finetune import TrainConfig
from .artifacts import write_json
from .exceptions import ConfigurationError
from .metrics_report import FlopsInput
from .moe_model import ModelConfig
from .synth_lang import CorpusConfig
from .taxonomy import Judge
from .training import PretrainConfig


class Settings(BaseSettings):
    """Process-level settings read from the environment or a .env file."""

    model_config = SettingsConfigDict(
        env_prefix="RA_MOE_", env_file=".env", env_file_encoding="utf-8", extra="ignore"
    )

    log_level: str = Field(default="INFO")
    log_file: Optional[str] = Field(default=None)
    runs_dir: str = Field(default="runs", description="Default output directory")
    default_seed: int = Field(default=42)
    torch_num_threads: int = Field(
        default=1, ge=1, description="Fixed so CPU reductions are reproducible"
    )


settings = Settings()


class Stage(str, Enum):
    GEN_DATA = "gen-data"
    PRETRAIN = "pretrain"
    CATEGORIZE = "categorize"
    PROFILE = "profile"
    IDENTIFY = "identify"
    FINETUNE = "finetune"
    EVAL = "eval"
    STEER = "steer"
    REPORT = "report"
    FLOPS = "flops"
    SWEEP = "sweep"


class Method(str, Enum):
    RA_MOE = "ra-moe"
    SFT = "sft"


class Ablation(str, Enum):
    NO_ALIGN = "no-align"
    NO_TASK_EXPERTS = "no-task-experts"
    NO_CI_FILTER = "no-ci-filter"
    ALL_LAYERS = "all-layers"


ABLATION_FLAGS = {
    Ablation.NO_ALIGN: "no_align",
    Ablation.NO_TASK_EXPERTS: "no_task_expert_restriction",
    Ablation.NO_CI_FILTER: "no_ci_filter",
    Ablation.ALL_LAYERS: "all_layers",
}

DEFAULT_STAGES = [
    Stage.GEN_DATA,
    Stage.PRETRAIN,
    Stage.CATEGORIZE,
    Stage.PROFILE,
    Stage.IDENTIFY,
    Stage.FINETUNE,
    Stage.EVAL,
    Stage.REPORT,
    Stage.FLOPS,
]


def default_notes() -> Dict[str, str]:
    return {
        "train.lambda_align": "1.0, alignment weight of the reference recipe",
        "train.k_experts": "8 task experts per middle layer, as in the reference recipe",
        "train.adapter_rank": (
            "0 (full fine-tuning) at desk scale; the reference recipe uses LoRA rank 16"
        ),
        "train.adapter_alpha": "32, reference LoRA alpha",
        "train.warmup_ratio": "0.03 with a linear schedule, as in the reference recipe",
        "train.weight_decay": "0.0, reference AdamW setting",
        "train.lr": "1e-3 at desk scale; the reference recipe uses 2e-5 for large models",
        "threshold_percentile": "50, median threshold of the middle-layer rule",
        "model.d_model": "48 (d_expert too), wide enough to memorize all mod-10 pairs",
        "pretrain.epochs": "8, lifts base source accuracy well above chance",
        "corpus.task_fraction": (
            "0.8, most pretraining text carries answered task prompts; "
            "at 0.5 the base model stays near chance"
        ),
        "flops": "B=4096, L=16, K=8, d_m=2048, d_e=1024, r=16, E=64 give the reference costs",
    }


def reference_flops() -> FlopsInput:
    return FlopsInput(B=4096, L=16, K=8, d_m=2048, d_e=1024, r=16, E=64)


class PipelineConfig(BaseModel):
    """Everything a pipeline run needs, stored as one JSON document."""

    model_config = ConfigDict(extra="forbid", populate_by_name=True)

    notes: Dict[str, str] = Field(default_factory=default_notes, alias="_notes")
    model: ModelConfig = Field(default_factory=ModelConfig)
    corpus: CorpusConfig = Field(default_factory=CorpusConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    method: Method = Method.RA_MOE
    judge: Judge = Judge.EXACT
    target_language: str = "tgt1"
    max_new_tokens: int = Field(default=8, ge=1)
    threshold_percentile: float = Field(default=50.0, gt=0.0, lt=100.0)
    reuse_decode_traces: bool = True
    steer_delta: float = 1.0
    expert_map_path: Optional[str] = Field(
        default=None, description="Existing task-expert map to transfer to this language"
    )
    run_name: Optional[str] = None
    report_runs: List[str] = Field(default_factory=list)
    sweep_lambdas: List[float] = Field(default_factory=lambda: [0.1, 0.5, 1.0, 2.0])
    sweep_ks: List[int] = Field(default_factory=lambda: [4, 8, 16, 32])
    flops: FlopsInput = Field(default_factory=reference_flops)
    stages: List[Stage] = Field(default_factory=lambda: list(DEFAULT_STAGES))

    def default_run_name(self) -> str:
        name = f"{self.method.value}-{self.target_language}-s{self.train.seed}"
        for ablation, flag in ABLATION_FLAGS.items():
            implied = ablation is Ablation.NO_ALIGN and self.method is Method.SFT
            if getattr(self.train, flag) and not implied:
                name += f"-{ablation.value}"
        return name

    @property
    def resolved_run_name(self) -> str:
        return self.run_name or self.default_run_name()


def apply_overrides(
    config: PipelineConfig,
    seed: Optional[int] = None,
    lambda_align: Optional[float] = None,
    k_experts: Optional[int] = None,
    ablations: Sequence[Ablation] = (),
    steer_delta: Optional[float] = None,
    method: Optional[Method] = None,
    judge: Optional[Judge] = None,
    expert_map_path: Optional[str] = None,
    run_name: Optional[str] = None,
) -> PipelineConfig:
    """Return a re-validated copy of ``config`` with command-line overrides applied.

    ``seed`` sets the corpus, pretraining and fine-tuning seeds together;
    the SFT method switches the alignment term off.
    """
    data = config.model_dump(mode="json", by_alias=True)
    if seed is not None:
        for section in ("corpus", "pretrain", "train"):
            data[section]["seed"] = seed
    if lambda_align is not None:
        data["train"]["lambda_align"] = lambda_align
    if k_experts is not None:
        data["train"]["k_experts"] = k_experts
    for ablation in ablations:
        data["train"][ABLATION_FLAGS[Ablation(ablation)]] = True
    if method is not None:
        data["method"] = Method(method).value
        data["train"]["no_align"] = Method(method) is Method.SFT or data["train"]["no_align"]
    for key, value in (
        ("steer_delta", steer_delta),
        ("judge", judge),
        ("expert_map_path", expert_map_path),
        ("run_name", run_name),
    ):
        if value is not None:
            data[key] = value.value if isinstance(value, Enum) else value
    try:
        return PipelineConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"Invalid override: {e}") from e


def load_pipeline_config(path: Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"Config file not found: {path}")
    try:
        return PipelineConfig.model_validate(json.loads(path.read_text(encoding="utf-8")))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"Config file {path} is not valid JSON: {e}") from e
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration in {path}: {e}") from e


def save_pipeline_config(config: PipelineConfig, path: Path) -> Path:
    return write_json(path, config.model_dump(mode="json", by_alias=True))
