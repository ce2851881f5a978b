"""Evaluation and analysis: accuracy, selection rate, correlation, FLOPs and divergence reports."""

import csv
import io
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, Field
from scipy import stats

from .artifacts import atomic_write_text, read_json, write_json
from .exceptions import InputError, InsufficientDataError
from .moe_model import DecodeResult, MoELanguageModel, RoutingTrace, greedy_decode
from .routing_analysis import DivergenceProfile, LayerRange, TaskExpertMap
from .synth_lang import LanguageSpec, ParallelExample
from .taxonomy import judge_exact

Decoder = Callable[[Sequence[int]], DecodeResult]

GIGA = 10**9


class FlopsInput(BaseModel):
    """Training-cost symbols: tokens per forward, layers, active experts, widths, rank, experts."""

    B: int = Field(ge=1)
    L: int = Field(ge=1)
    K: int = Field(ge=1)
    d_m: int = Field(ge=1)
    d_e: int = Field(ge=1)
    r: int = Field(default=0, ge=0)
    E: int = Field(default=1, ge=1)


class FlopsEstimate(BaseModel):
    base: int
    lora: int
    align: int
    total: int

    def gflops(self) -> Dict[str, str]:
        return {
            "base": format_gflops(self.base),
            "lora": format_gflops(self.lora),
            "align": format_gflops(self.align),
            "total": format_gflops(self.total),
        }


def format_gflops(flops: int) -> str:
    """FLOPs / 1e9 rounded half-up to one decimal, in integer arithmetic."""
    tenths = (flops + GIGA // 20) // (GIGA // 10)
    return f"{tenths // 10}.{tenths % 10}"


def flops_estimate(inp: FlopsInput) -> FlopsEstimate:
    base = 6 * inp.B * inp.L * inp.K * inp.d_m * inp.d_e
    lora = 4 * inp.B * inp.L * inp.K * inp.r * (inp.d_m + inp.d_e)
    align = 2 * inp.B * inp.L * inp.E
    return FlopsEstimate(base=base, lora=lora, align=align, total=base + lora)


@dataclass
class SideEvaluation:
    accuracy: float
    correct: List[bool]
    outputs: List[DecodeResult]

    @property
    def traces(self) -> List[RoutingTrace]:
        return [out.trace for out in self.outputs]


def evaluate_side(
    model: MoELanguageModel,
    examples: Sequence[ParallelExample],
    langs: Mapping[str, LanguageSpec],
    side: str = "tgt",
    max_new: int = 8,
    decoder: Optional[Decoder] = None,
) -> SideEvaluation:
    """Greedy-decode one side of every example and judge it by exact match."""
    if not examples:
        raise InputError("Eval set is empty")
    if side not in ("src", "tgt"):
        raise InputError(f"side must be 'src' or 'tgt', got {side!r}")
    decode = decoder or (lambda prompt: greedy_decode(model, prompt, max_new))
    correct, outputs = [], []
    for ex in examples:
        lang = langs[ex.src_lang if side == "src" else ex.tgt_lang]
        out = decode(ex.prompt_src if side == "src" else ex.prompt_tgt)
        outputs.append(out)
        correct.append(judge_exact(out.tokens, ex.gold_answer, lang))
    return SideEvaluation(accuracy=sum(correct) / len(correct), correct=correct, outputs=outputs)


def eval_accuracy(
    model: MoELanguageModel,
    examples: Sequence[ParallelExample],
    langs: Mapping[str, LanguageSpec],
    side: str = "tgt",
    max_new: int = 8,
    decoder: Optional[Decoder] = None,
) -> float:
    return evaluate_side(model, examples, langs, side, max_new, decoder).accuracy


def selection_rate(
    traces: Sequence[RoutingTrace],
    expert_map: TaskExpertMap,
    top_k: int,
    mode: str = "slots",
    all_layers: bool = False,
) -> float:
    """Share of routing that lands on task experts over generated tokens and middle layers.

    ``slots`` counts top-k selection slots held by task experts; ``mass``
    sums the routing probability they receive instead.
    """
    if mode not in ("slots", "mass"):
        raise InputError(f"Unknown selection-rate mode {mode!r}")
    layers = expert_map.active_layers(all_layers=all_layers)
    if not layers:
        raise InputError("Task-expert map has no layer with task experts")
    hits = 0.0
    total = 0
    for trace in traces:
        positions = list(trace.generated_positions)
        if not positions:
            continue
        for layer in layers:
            probs = trace.layers[layer][positions]
            member = torch.zeros(probs.shape[-1], dtype=torch.bool)
            member[expert_map.expert_ids(layer)] = True
            if mode == "slots":
                chosen = probs.topk(top_k, dim=-1).indices
                hits += int(member[chosen].sum())
                total += chosen.numel()
            else:
                hits += float(probs[:, member].sum())
                total += len(positions)
    if total == 0:
        raise InsufficientDataError("No generated tokens to compute a selection rate over")
    return hits / total


def pearson(x: Sequence[float], y: Sequence[float]) -> Tuple[float, float]:
    """Sample correlation and its two-sided p-value, via scipy."""
    xs, ys = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise InputError("pearson needs two equal-length sequences")
    n = len(xs)
    if n < 3:
        raise InsufficientDataError(f"pearson needs at least 3 points, got {n}")
    if np.ptp(xs) == 0.0 or np.ptp(ys) == 0.0:
        raise InsufficientDataError("pearson is undefined for a zero-variance input")
    r, p = stats.pearsonr(xs, ys)
    return float(r), float(p)


def relative_gain(accuracy: float, sft_accuracy: float) -> Optional[float]:
    """(accuracy - SFT) / SFT; undefined when the SFT accuracy is zero."""
    if sft_accuracy == 0.0:
        return None
    return (accuracy - sft_accuracy) / sft_accuracy


class DivergenceRow(BaseModel):
    layer: int
    method: str
    divergence: float


class DivergenceReport(BaseModel):
    """Per-layer divergence of several methods with the middle-layer range marked."""

    methods: List[str]
    mid_layers: LayerRange
    rows: List[DivergenceRow]
    mid_means: Dict[str, float]

    def profile(self, method: str) -> List[float]:
        return [row.divergence for row in self.rows if row.method == method]

    def to_csv(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["layer", "method", "divergence", "mid_layer"])
        start, end = self.mid_layers
        for row in self.rows:
            writer.writerow(
                [row.layer, row.method, repr(row.divergence), int(start <= row.layer <= end)]
            )
        return buffer.getvalue()

    def save(self, directory: Path) -> Dict[str, Path]:
        return {
            "json": write_json(directory / "divergence.json", self.model_dump(mode="json")),
            "csv": atomic_write_text(directory / "divergence.csv", self.to_csv()),
        }

    @classmethod
    def load(cls, path: Path) -> "DivergenceReport":
        return cls(**read_json(path))


def divergence_report(
    profiles: Mapping[str, DivergenceProfile], mid_layers: LayerRange
) -> DivergenceReport:
    """Tabulate per-layer divergence for each method in the given order."""
    if not profiles:
        raise InputError("divergence_report needs at least one profile")
    counts = {name: p.n_layers for name, p in profiles.items()}
    if len(set(counts.values())) != 1:
        raise InputError(f"Profiles disagree on layer count: {counts}")
    n_layers = next(iter(counts.values()))
    if not 0 <= mid_layers[0] <= mid_layers[1] < n_layers:
        raise InputError(f"Middle layers {mid_layers} outside {n_layers} layers")
    rows = [
        DivergenceRow(layer=layer, method=name, divergence=profile.values[layer])
        for name, profile in profiles.items()
        for layer in range(n_layers)
    ]
    return DivergenceReport(
        methods=list(profiles),
        mid_layers=mid_layers,
        rows=rows,
        mid_means={name: p.segment_mean(mid_layers) for name, p in profiles.items()},
    )


class RunSummary(BaseModel):
    """Evaluation outcome of one run, comparable across methods on the same eval set."""

    run_name: str
    method: str
    tgt_lang: str
    seed: int = 0
    eval_hash: str
    accuracy: Dict[str, float] = Field(description="Eval accuracy by language")
    ci_proportion: Optional[float] = None
    relative_gain: Optional[float] = None
    mid_divergence: Optional[float] = None
    selection_rate: Optional[float] = None
    mid_layers: Optional[LayerRange] = None
    profile_before: Optional[DivergenceProfile] = None
    profile_after: Optional[DivergenceProfile] = None

    @property
    def target_accuracy(self) -> float:
        return self.accuracy[self.tgt_lang]


def _fmt(value: Optional[float], spec: str = ".3f") -> str:
    return "-" if value is None else format(value, spec)


def format_summary_table(summaries: Sequence[RunSummary]) -> str:
    """Plain-text comparison table, one row per run in the given order."""
    if not summaries:
        return "No runs to compare."

    langs: List[str] = []
    for summary in summaries:
        for lang in summary.accuracy:
            if lang not in langs:
                langs.append(lang)

    header = ["run", "method"] + [f"acc[{lang}]" for lang in langs]
    header += ["ci", "gain", "mid_div", "sel_rate"]
    rows = [header]
    for s in summaries:
        row = [s.run_name, s.method] + [_fmt(s.accuracy.get(lang)) for lang in langs]
        row += [
            _fmt(s.ci_proportion),
            _fmt(s.relative_gain, "+.3f"),
            _fmt(s.mid_divergence, ".4f"),
            _fmt(s.selection_rate),
        ]
        rows.append(row)

    widths = [max(len(row[col]) for row in rows) for col in range(len(header))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"
