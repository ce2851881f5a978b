"""Stage 2: sequence routing, cross-lingual divergence and task-expert selection."""

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy.special import rel_entr

from .artifacts import read_json, read_jsonl, write_json, write_jsonl
from .exceptions import (
    DegenerateProfileError,
    DegenerateSampleError,
    IdMismatchError,
    InputError,
    InsufficientDataError,
)
from .logger import logger
from .moe_model import MoELanguageModel, RouterBias, RoutingTrace, forward

DIST_TOLERANCE = 1e-9
LayerRange = Tuple[int, int]


@dataclass(frozen=True)
class SeqRoutingDist:
    """Mean router distribution over generated positions, one row per layer."""

    id: str
    lang: str
    q: np.ndarray  # (n_layers, n_experts)

    @property
    def n_layers(self) -> int:
        return int(self.q.shape[0])


class DivergenceProfile(BaseModel):
    values: List[float] = Field(description="Mean normalized JS divergence per layer")
    n_pairs: int = Field(ge=1)

    @field_validator("values")
    @classmethod
    def _in_unit_interval(cls, values: List[float]) -> List[float]:
        if not values:
            raise ValueError("Profile needs at least one layer")
        if any(not 0.0 <= v <= 1.0 for v in values):
            raise ValueError("Divergence values must lie in [0, 1]")
        return values

    @property
    def n_layers(self) -> int:
        return len(self.values)

    def segment_mean(self, layers: LayerRange) -> float:
        start, end = layers
        return float(np.mean(self.values[start : end + 1]))


class ExpertScore(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: int = Field(ge=0)
    delta: float = Field(gt=0.0)


class TaskExpertMap(BaseModel):
    """Middle layers, per-layer task experts and frozen source references.

    Expert sets and references cover every layer; ``mid_layers`` marks the
    range the alignment loss uses by default.
    """

    model_config = ConfigDict(frozen=True)

    mid_layers: LayerRange
    k: int = Field(ge=1)
    n_experts: int = Field(ge=1)
    experts: Dict[int, List[ExpertScore]]
    references: Dict[str, Dict[int, List[float]]] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check(self) -> "TaskExpertMap":
        start, end = self.mid_layers
        if start < 0 or end < start:
            raise ValueError(f"mid_layers {self.mid_layers} is not a non-empty range")
        for layer, scores in self.experts.items():
            if len(scores) > self.k:
                raise ValueError(f"Layer {layer} holds {len(scores)} experts, more than K={self.k}")
            if any(s.id >= self.n_experts for s in scores):
                raise ValueError(f"Layer {layer} names an expert id >= {self.n_experts}")
        for example_id, by_layer in self.references.items():
            for layer, ref in by_layer.items():
                check_distribution(np.asarray(ref), f"reference {example_id}/{layer}")
        return self

    def mid_layer_ids(self) -> List[int]:
        return list(range(self.mid_layers[0], self.mid_layers[1] + 1))

    def expert_ids(self, layer: int) -> List[int]:
        return [s.id for s in self.experts.get(layer, [])]

    def active_layers(self, all_layers: bool = False) -> List[int]:
        """Layers with a non-empty expert set (middle layers unless ``all_layers``)."""
        candidates = sorted(self.experts) if all_layers else self.mid_layer_ids()
        return [layer for layer in candidates if self.expert_ids(layer)]

    def save(self, path: Path) -> Path:
        return write_json(path, self.model_dump(mode="json"))

    @classmethod
    def load(cls, path: Path) -> "TaskExpertMap":
        return cls(**read_json(path))


def check_distribution(p: np.ndarray, name: str = "distribution") -> None:
    if p.ndim != 1 or p.size == 0:
        raise InputError(f"{name} must be a non-empty vector")
    if not np.all(np.isfinite(p)) or np.any(p < 0.0):
        raise InputError(f"{name} has negative or non-finite entries")
    if abs(float(p.sum()) - 1.0) > DIST_TOLERANCE:
        raise InputError(f"{name} sums to {float(p.sum())!r}, not 1")


def teacher_force_trace(
    model: MoELanguageModel,
    prompt: Sequence[int],
    response: Sequence[int],
    router_bias: Optional[RouterBias] = None,
) -> RoutingTrace:
    """Routing over prompt⊕response from one forward pass; G is the response span."""
    if not response:
        raise DegenerateSampleError("Teacher forcing needs a non-empty response")
    _, trace = forward(
        model, list(prompt) + list(response), capture=True, router_bias=router_bias
    )
    assert trace is not None
    return trace.with_generated(range(len(prompt), len(prompt) + len(response)))


def seq_routing_dist(trace: RoutingTrace, id: str = "", lang: str = "") -> SeqRoutingDist:
    """Per-layer arithmetic mean of the token distributions over generated positions."""
    if not trace.generated_positions:
        raise DegenerateSampleError(f"Trace {id or '<anonymous>'} has no generated positions")
    positions = list(trace.generated_positions)
    q = np.stack(
        [layer.numpy()[positions].mean(axis=0) for layer in trace.layers]
    )
    return SeqRoutingDist(id=id, lang=lang, q=q)


def js_divergence(p: Sequence[float], q: Sequence[float]) -> float:
    """Jensen-Shannon divergence with base-2 logarithms, in [0, 1]."""
    p_arr = np.asarray(p, dtype=np.float64)
    q_arr = np.asarray(q, dtype=np.float64)
    if p_arr.shape != q_arr.shape:
        raise InputError(f"Length mismatch: {p_arr.shape} vs {q_arr.shape}")
    check_distribution(p_arr, "p")
    check_distribution(q_arr, "q")
    m = (p_arr + q_arr) / 2.0
    # rel_entr uses 0 * log(0 / x) = 0
    js = 0.5 * (rel_entr(p_arr, m).sum() + rel_entr(q_arr, m).sum()) / math.log(2.0)
    return float(min(max(js, 0.0), 1.0))


def divergence_profile(
    dists_src: Sequence[SeqRoutingDist], dists_tgt: Sequence[SeqRoutingDist]
) -> DivergenceProfile:
    """Per-layer mean JS divergence over source/target pairs matched by id."""
    by_id = {d.id: d for d in dists_tgt}
    src_ids = [d.id for d in dists_src]
    if set(src_ids) != set(by_id) or len(src_ids) != len(by_id):
        missing = sorted(set(src_ids) ^ set(by_id))[:5]
        raise IdMismatchError(f"Source and target ids differ, e.g. {missing}")
    if not dists_src:
        raise InsufficientDataError("Divergence profile needs at least one pair")

    per_pair = np.array(
        [
            [js_divergence(src.q[layer], by_id[src.id].q[layer]) for layer in range(src.n_layers)]
            for src in dists_src
        ]
    )
    return DivergenceProfile(values=per_pair.mean(axis=0).tolist(), n_pairs=len(dists_src))


def _longest_run(flags: Sequence[bool]) -> Optional[LayerRange]:
    best: Optional[LayerRange] = None
    start = None
    for idx, flag in enumerate(list(flags) + [False]):
        if flag and start is None:
            start = idx
        elif not flag and start is not None:
            if best is None or idx - start > best[1] - best[0] + 1:
                best = (start, idx - 1)
            start = None
    return best


def middle_layers(profile: DivergenceProfile, percentile: float = 50.0) -> LayerRange:
    """Longest contiguous run of layers strictly below the threshold; earliest wins ties.

    The threshold is the median at ``percentile=50`` (mean of the middle two
    for an even layer count) and a linearly interpolated percentile otherwise.
    """
    values = np.asarray(profile.values)
    if values.size < 2:
        raise InputError("Middle-layer selection needs at least two layers")
    if percentile == 50.0:
        threshold = float(np.median(values))
    else:
        threshold = float(np.percentile(values, percentile))
    segment = _longest_run(values < threshold)
    if segment is None:
        raise DegenerateProfileError(
            f"Degenerate profile: no layer strictly below threshold {threshold:.6f}"
        )
    return segment


def task_specificity(
    dists_task: Sequence[SeqRoutingDist], dists_gen: Sequence[SeqRoutingDist], layer: int
) -> np.ndarray:
    """Per-expert mean routing weight on task data minus that on general data."""
    if not dists_task or not dists_gen:
        raise InsufficientDataError("Task specificity needs task and general distributions")
    task_mean = np.mean([d.q[layer] for d in dists_task], axis=0)
    gen_mean = np.mean([d.q[layer] for d in dists_gen], axis=0)
    return task_mean - gen_mean


def top_positive_experts(delta: Sequence[float], k: int) -> List[ExpertScore]:
    """Up to ``k`` experts with the largest positive score, lower id first on ties."""
    if k < 1:
        raise InputError(f"K must be at least 1, got {k}")
    order = sorted(range(len(delta)), key=lambda e: (-float(delta[e]), e))
    return [ExpertScore(id=e, delta=float(delta[e])) for e in order if delta[e] > 0.0][:k]


def select_task_experts(
    deltas: Mapping[int, Sequence[float]], k: int
) -> Dict[int, List[ExpertScore]]:
    selected = {}
    for layer in sorted(deltas):
        selected[layer] = top_positive_experts(deltas[layer], k)
        if not selected[layer]:
            logger.warning(f"Layer {layer} has no expert with positive task specificity")
    return selected


def build_reference_store(
    ids: Iterable[str],
    src_dists: Mapping[str, SeqRoutingDist],
    layers: Sequence[int],
) -> Dict[str, Dict[int, List[float]]]:
    """Copy the source routing of each listed example for the given layers."""
    store = {}
    for example_id in ids:
        if example_id not in src_dists:
            raise IdMismatchError(f"No source routing distribution for example {example_id}")
        q = src_dists[example_id].q
        store[example_id] = {layer: q[layer].tolist() for layer in layers}
    return store


def identify_task_experts(
    profile: DivergenceProfile,
    dists_task: Sequence[SeqRoutingDist],
    dists_gen: Sequence[SeqRoutingDist],
    reference_ids: Iterable[str],
    src_dists: Mapping[str, SeqRoutingDist],
    k: int,
    percentile: float = 50.0,
    transfer_from: Optional[TaskExpertMap] = None,
) -> TaskExpertMap:
    """Run middle-layer detection, expert selection and reference storage.

    With ``transfer_from`` the middle layers and expert sets are taken from an
    existing map and only the references are rebuilt.
    """
    n_layers = profile.n_layers
    if transfer_from is not None:
        mid, experts, n_experts = (
            transfer_from.mid_layers,
            dict(transfer_from.experts),
            transfer_from.n_experts,
        )
        logger.info(f"Reusing middle layers {mid} and task experts from an existing map")
    else:
        mid = middle_layers(profile, percentile)
        deltas = {
            layer: task_specificity(dists_task, dists_gen, layer) for layer in range(n_layers)
        }
        experts = select_task_experts(deltas, k)
        n_experts = int(dists_task[0].q.shape[1])
    logger.info(f"Middle layers: {mid[0]}..{mid[1]} of {n_layers}")
    for layer in range(mid[0], mid[1] + 1):
        logger.info(f"Layer {layer} task experts: {[s.id for s in experts.get(layer, [])]}")

    references = build_reference_store(reference_ids, src_dists, list(range(n_layers)))
    return TaskExpertMap(
        mid_layers=mid,
        k=max(k, max((len(v) for v in experts.values()), default=1)),
        n_experts=n_experts,
        experts=experts,
        references=references,
    )


def dists_to_records(dists: Iterable[SeqRoutingDist]) -> List[dict]:
    return [
        {"id": d.id, "lang": d.lang, "layer": layer, "q": d.q[layer].tolist()}
        for d in dists
        for layer in range(d.n_layers)
    ]


def dists_from_records(records: Iterable[Mapping]) -> List[SeqRoutingDist]:
    rows: Dict[Tuple[str, str], Dict[int, List[float]]] = {}
    for rec in records:
        rows.setdefault((rec["id"], rec["lang"]), {})[int(rec["layer"])] = rec["q"]
    return [
        SeqRoutingDist(
            id=id_, lang=lang, q=np.array([by_layer[layer] for layer in sorted(by_layer)])
        )
        for (id_, lang), by_layer in rows.items()
    ]


def save_dists(path: Path, dists: Iterable[SeqRoutingDist]) -> Path:
    return write_jsonl(path, dists_to_records(dists))


def load_dists(path: Path) -> List[SeqRoutingDist]:
    return dists_from_records(read_jsonl(path))
