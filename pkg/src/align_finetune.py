"""Stage 3: routing-aligned fine-tuning, its ablations and the routing-steering baseline."""

import copy
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field

from .exceptions import InputError, NonFiniteLossError
from .logger import format_metrics, logger
from .metrics_report import selection_rate
from .moe_model import (
    DecodeResult,
    MoELanguageModel,
    RouterBias,
    attach_adapters,
    cross_entropy,
    greedy_decode,
)
from .routing_analysis import TaskExpertMap, teacher_force_trace
from .synth_lang import LanguageSpec, ParallelExample, TaxonomyLabel
from .taxonomy import gold_response
from .training import (
    Batch,
    build_optimizer,
    build_scheduler,
    epoch_batches,
    optimizer_step,
    pad_batch,
)

StepCallback = Callable[[int, MoELanguageModel], None]


class TrainConfig(BaseModel):
    """Fine-tuning hyperparameters and ablation switches."""

    model_config = ConfigDict(extra="forbid")

    lambda_align: float = Field(default=1.0, ge=0.0)
    k_experts: int = Field(default=8, ge=1)
    epochs: int = Field(default=3, ge=1)
    batch_size: int = Field(default=16, ge=1)
    lr: float = Field(default=1e-3, gt=0)
    warmup_ratio: float = Field(default=0.03, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    grad_clip: Optional[float] = Field(default=None, gt=0)
    seed: int = 0
    adapter_rank: int = Field(default=0, ge=0)
    adapter_alpha: float = Field(default=32.0, gt=0)
    epsilon_kl: float = Field(default=1e-9, gt=0.0, le=1e-6)
    no_align: bool = False
    no_task_expert_restriction: bool = False
    no_ci_filter: bool = False
    all_layers: bool = False
    log_every: int = Field(default=10, ge=1)
    eval_every: int = Field(default=50, ge=1)
    eval_limit: int = Field(default=64, ge=1, description="Eval examples scored during training")

    @property
    def aligns(self) -> bool:
        return not self.no_align and self.lambda_align > 0.0


@dataclass
class FinetuneBatch:
    examples: List[ParallelExample]
    batch: Batch
    prompt_lengths: List[int]
    seq_lengths: List[int]


@dataclass
class AlignBatchState:
    """Live target routing and frozen references of the examples that get aligned.

    ``live[i][layer]`` is the mean target routing over the response positions
    of example ``ids[i]`` and stays attached to the graph.
    """

    ids: List[str] = field(default_factory=list)
    live: List[Dict[int, torch.Tensor]] = field(default_factory=list)
    references: List[Dict[int, torch.Tensor]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class LossComponents:
    total: torch.Tensor
    loss_ce: float
    loss_align: float
    n_aligned: int
    n_fallbacks: int


class StepRecord(BaseModel):
    step: int
    loss_ce: float
    loss_align: float
    eval_ce: Optional[float] = None
    selection_rate: Optional[float] = None


class RunMetrics(BaseModel):
    records: List[StepRecord] = Field(default_factory=list)
    epoch_loss_ce: List[float] = Field(default_factory=list)
    n_steps: int = 0
    n_fallbacks: int = 0


def total_loss(
    loss_ce: torch.Tensor, loss_align: torch.Tensor, lambda_align: float
) -> torch.Tensor:
    return loss_ce + lambda_align * loss_align


def restrict_renormalize(
    q: torch.Tensor, experts: Sequence[int], epsilon_kl: float = 1e-9
) -> Tuple[torch.Tensor, bool]:
    """Restrict ``q`` to ``experts`` and renormalize.

    Returns the restricted distribution and whether its mass fell below
    ``epsilon_kl``, in which case it is replaced by the uniform distribution.
    """
    if len(experts) == 0:
        raise InputError("Cannot restrict a routing distribution to an empty expert set")
    restricted = q[list(experts)]
    mass = restricted.sum()
    if float(mass) < epsilon_kl:
        return torch.full_like(restricted, 1.0 / len(experts)), True
    return restricted / mass, False


def _kl(reference: torch.Tensor, target: torch.Tensor, epsilon_kl: float) -> torch.Tensor:
    floored = target.clamp(min=epsilon_kl)
    floored = floored / floored.sum()
    # xlogy gives 0 * log 0 = 0 on the reference side
    terms = torch.special.xlogy(reference, reference) - torch.special.xlogy(reference, floored)
    return terms.sum()


def alignment_layers(expert_map: TaskExpertMap, config: TrainConfig) -> List[int]:
    if config.no_task_expert_restriction:
        if config.all_layers:
            return sorted(expert_map.experts)
        return expert_map.mid_layer_ids()
    return expert_map.active_layers(all_layers=config.all_layers)


def kl_align_loss(
    state: AlignBatchState,
    expert_map: TaskExpertMap,
    epsilon_kl: float = 1e-9,
    restrict: bool = True,
) -> Tuple[torch.Tensor, int]:
    """Mean over examples of the summed per-layer KL(reference ‖ live target).

    Both sides are restricted to the layer's task experts (or kept whole when
    ``restrict`` is off). Returns the loss and the number of uniform fallbacks.
    """
    if not len(state):
        return torch.zeros((), dtype=torch.float64), 0
    all_experts = list(range(expert_map.n_experts))
    fallbacks = 0
    per_example = []
    for live, reference in zip(state.live, state.references):
        terms = []
        for layer in sorted(live):
            experts = expert_map.expert_ids(layer) if restrict else all_experts
            if not experts:
                continue
            ref, ref_flag = restrict_renormalize(reference[layer], experts, epsilon_kl)
            tgt, tgt_flag = restrict_renormalize(live[layer], experts, epsilon_kl)
            fallbacks += int(ref_flag) + int(tgt_flag)
            terms.append(_kl(ref, tgt, epsilon_kl))
        per_example.append(
            torch.stack(terms).sum() if terms else torch.zeros((), dtype=torch.float64)
        )
    return torch.stack(per_example).mean(), fallbacks


def make_finetune_batch(
    examples: Sequence[ParallelExample], langs: Mapping[str, LanguageSpec], eos_id: int
) -> FinetuneBatch:
    """Target prompt⊕gold response per example, scored on the response only."""
    sequences, starts, prompt_lengths = [], [], []
    for ex in examples:
        response = gold_response(ex, langs[ex.tgt_lang], eos_id)
        sequences.append(list(ex.prompt_tgt) + response)
        prompt_lengths.append(len(ex.prompt_tgt))
        starts.append(len(ex.prompt_tgt) - 1)
    return FinetuneBatch(
        examples=list(examples),
        batch=pad_batch(sequences, starts, eos_id),
        prompt_lengths=prompt_lengths,
        seq_lengths=[len(s) for s in sequences],
    )


def build_align_state(
    fbatch: FinetuneBatch,
    router_probs: Sequence[torch.Tensor],
    expert_map: TaskExpertMap,
    layers: Sequence[int],
    include_all: bool = False,
) -> AlignBatchState:
    """Collect the ci rows of a batch (every row with ``include_all``)."""
    state = AlignBatchState()
    for row, ex in enumerate(fbatch.examples):
        if not include_all and ex.label is not TaxonomyLabel.CI:
            continue
        if ex.id not in expert_map.references:
            logger.debug(f"No reference routing for {ex.id}; skipped in alignment")
            continue
        span = slice(fbatch.prompt_lengths[row], fbatch.seq_lengths[row])
        state.ids.append(ex.id)
        state.live.append({layer: router_probs[layer][row, span].mean(dim=0) for layer in layers})
        state.references.append(
            {
                layer: torch.tensor(expert_map.references[ex.id][layer], dtype=torch.float64)
                for layer in layers
            }
        )
    return state


def combined_loss(
    fbatch: FinetuneBatch,
    model: MoELanguageModel,
    expert_map: TaskExpertMap,
    config: TrainConfig,
) -> LossComponents:
    """Cross-entropy over the whole batch plus weighted alignment over its ci subset.

    With alignment switched off (``no_align`` or a zero weight) the total is
    the cross-entropy tensor itself; the alignment term is still measured,
    detached, for logging.
    """
    logits, router_probs = model(fbatch.batch.tokens)
    loss_ce = cross_entropy(logits[:, :-1], fbatch.batch.targets, fbatch.batch.loss_mask)
    layers = alignment_layers(expert_map, config)
    restrict = not config.no_task_expert_restriction

    if config.aligns:
        state = build_align_state(fbatch, router_probs, expert_map, layers, config.no_ci_filter)
        loss_align, fallbacks = kl_align_loss(state, expert_map, config.epsilon_kl, restrict)
        total = total_loss(loss_ce, loss_align, config.lambda_align)
    else:
        with torch.no_grad():
            detached = [p.detach() for p in router_probs]
            state = build_align_state(fbatch, detached, expert_map, layers, config.no_ci_filter)
            loss_align, fallbacks = kl_align_loss(state, expert_map, config.epsilon_kl, restrict)
        total = loss_ce

    return LossComponents(
        total=total,
        loss_ce=float(loss_ce),
        loss_align=float(loss_align),
        n_aligned=len(state),
        n_fallbacks=fallbacks,
    )


def eval_cross_entropy(
    model: MoELanguageModel, examples: Sequence[ParallelExample], langs: Mapping[str, LanguageSpec]
) -> float:
    fbatch = make_finetune_batch(examples, langs, model.config.eos_id)
    with torch.no_grad():
        logits, _ = model(fbatch.batch.tokens)
        return float(
            cross_entropy(logits[:, :-1], fbatch.batch.targets, fbatch.batch.loss_mask)
        )


def eval_selection_rate(
    model: MoELanguageModel,
    examples: Sequence[ParallelExample],
    langs: Mapping[str, LanguageSpec],
    expert_map: TaskExpertMap,
) -> float:
    """Selection rate over teacher-forced gold target responses."""
    eos = model.config.eos_id
    traces = [
        teacher_force_trace(model, ex.prompt_tgt, gold_response(ex, langs[ex.tgt_lang], eos))
        for ex in examples
    ]
    return selection_rate(traces, expert_map, model.config.top_k)


def finetune(
    model: MoELanguageModel,
    examples: Sequence[ParallelExample],
    langs: Mapping[str, LanguageSpec],
    expert_map: TaskExpertMap,
    config: TrainConfig,
    eval_examples: Sequence[ParallelExample] = (),
    on_step: Optional[StepCallback] = None,
) -> Tuple[MoELanguageModel, RunMetrics]:
    """Fine-tune on target-language examples with the combined objective.

    The input model is left untouched. With ``adapter_rank > 0`` fresh
    adapters are attached and only they are trained. ``on_step`` is called
    with the step number and the model after every optimizer step.
    """
    if not examples:
        raise InputError("Fine-tuning set is empty")
    if config.adapter_rank > 0:
        model = attach_adapters(model, config.adapter_rank, config.seed, config.adapter_alpha)
    else:
        model = copy.deepcopy(model)
        for param in model.parameters():
            param.requires_grad_(True)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(examples) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    optimizer = build_optimizer(model, config.lr, config.weight_decay)
    scheduler = build_scheduler(optimizer, total_steps, config.warmup_ratio)
    eval_subset = list(eval_examples)[: config.eval_limit]
    n_ci = sum(1 for ex in examples if ex.label is TaxonomyLabel.CI)
    logger.info(
        f"Fine-tuning on {len(examples)} examples ({n_ci} ci) for {total_steps} steps, "
        f"lambda={config.lambda_align}, aligning={config.aligns}"
    )

    metrics = RunMetrics()
    eos = model.config.eos_id
    step = 0
    for epoch in range(config.epochs):
        epoch_ce = 0.0
        for indices in epoch_batches(len(examples), config.batch_size, rng):
            fbatch = make_finetune_batch([examples[i] for i in indices], langs, eos)
            parts = combined_loss(fbatch, model, expert_map, config)
            if not math.isfinite(parts.loss_ce) or not math.isfinite(parts.loss_align):
                raise NonFiniteLossError(
                    f"Non-finite loss at step {step}: L_CE={parts.loss_ce}, "
                    f"L_align={parts.loss_align}, batch ids {[ex.id for ex in fbatch.examples][:4]}"
                )
            optimizer_step(model, parts.total, optimizer, scheduler, config.grad_clip)
            step += 1
            epoch_ce += parts.loss_ce
            metrics.n_fallbacks += parts.n_fallbacks
            if parts.n_fallbacks:
                logger.warning(
                    f"Step {step}: {parts.n_fallbacks} restricted distributions "
                    f"fell back to uniform"
                )
            if on_step is not None:
                on_step(step, model)

            is_eval = bool(eval_subset) and (step % config.eval_every == 0 or step == total_steps)
            if step % config.log_every == 0 or is_eval:
                record = StepRecord(step=step, loss_ce=parts.loss_ce, loss_align=parts.loss_align)
                if is_eval:
                    record.eval_ce = eval_cross_entropy(model, eval_subset, langs)
                    record.selection_rate = eval_selection_rate(
                        model, eval_subset, langs, expert_map
                    )
                metrics.records.append(record)
                logger.info(
                    f"step {step}/{total_steps} "
                    + format_metrics(
                        L_CE=parts.loss_ce,
                        L_align=parts.loss_align,
                        eval_ce=record.eval_ce,
                        sel=record.selection_rate,
                    )
                )
        metrics.epoch_loss_ce.append(epoch_ce / steps_per_epoch)
    metrics.n_steps = step
    return model, metrics


def steer_bias(expert_map: TaskExpertMap, delta: float, all_layers: bool = False) -> RouterBias:
    """Router-logit offsets: ``delta`` on every task expert of each steered layer."""
    bias: RouterBias = {}
    for layer in expert_map.active_layers(all_layers=all_layers):
        offsets = torch.zeros(expert_map.n_experts, dtype=torch.float64)
        offsets[expert_map.expert_ids(layer)] = delta
        bias[layer] = offsets
    return bias


def routing_steer_decode(
    model: MoELanguageModel,
    prompt: Sequence[int],
    expert_map: TaskExpertMap,
    delta: float,
    max_new: int,
) -> DecodeResult:
    """Greedy decoding with task-expert router logits raised by ``delta`` in middle layers."""
    bias = steer_bias(expert_map, delta)
    if not bias:
        raise InputError("Task-expert map has no middle layer with task experts to steer")
    return greedy_decode(model, prompt, max_new, router_bias=bias)
