"""Shared training machinery: batching, AdamW with warmup + linear decay, and pretraining."""

import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence

import numpy as np
import torch
from pydantic import BaseModel, ConfigDict, Field
from torch.optim import AdamW
from torch.optim.lr_scheduler import LambdaLR

from .exceptions import InputError, NonFiniteLossError
from .logger import format_metrics, logger
from .moe_model import ModelConfig, MoELanguageModel, cross_entropy, init_params
from .synth_lang import TextSample


class PretrainConfig(BaseModel):
    """Optimizer settings for building the base model from the synthetic corpus."""

    model_config = ConfigDict(extra="forbid")

    epochs: int = Field(default=8, ge=1)
    batch_size: int = Field(default=32, ge=1)
    lr: float = Field(default=3e-3, gt=0)
    warmup_ratio: float = Field(default=0.03, ge=0.0, lt=1.0)
    weight_decay: float = Field(default=0.0, ge=0.0)
    grad_clip: Optional[float] = Field(default=1.0, gt=0)
    seed: int = 0
    log_every: int = Field(default=100, ge=1)


@dataclass
class Batch:
    """Right-padded token batch; targets and mask align with logits[:, :-1]."""

    tokens: torch.Tensor  # (B, T)
    targets: torch.Tensor  # (B, T - 1)
    loss_mask: torch.Tensor  # (B, T - 1), bool

    @property
    def size(self) -> int:
        return int(self.tokens.shape[0])


def pad_batch(
    sequences: Sequence[Sequence[int]], loss_starts: Sequence[int], pad_id: int
) -> Batch:
    """Pad sequences on the right and mark the scored next-token positions.

    Position ``j`` of ``targets`` predicts token ``j + 1``; for each sequence
    positions ``loss_starts[i] .. len(seq) - 2`` are scored. Causal attention
    keeps padding from influencing real positions.
    """
    if not sequences or len(sequences) != len(loss_starts):
        raise InputError("pad_batch needs one loss start per non-empty sequence")
    width = max(len(seq) for seq in sequences)
    if width < 2:
        raise InputError("Sequences need at least two tokens to form targets")
    tokens = torch.full((len(sequences), width), pad_id, dtype=torch.long)
    mask = torch.zeros((len(sequences), width - 1), dtype=torch.bool)
    for row, (seq, start) in enumerate(zip(sequences, loss_starts)):
        tokens[row, : len(seq)] = torch.as_tensor(list(seq), dtype=torch.long)
        mask[row, start : len(seq) - 1] = True
    return Batch(tokens=tokens, targets=tokens[:, 1:], loss_mask=mask)


def batch_cross_entropy(model: MoELanguageModel, batch: Batch) -> torch.Tensor:
    logits, _ = model(batch.tokens)
    return cross_entropy(logits[:, :-1], batch.targets, batch.loss_mask)


def build_optimizer(
    model: MoELanguageModel, lr: float, weight_decay: float = 0.0
) -> AdamW:
    trainable = [p for p in model.parameters() if p.requires_grad]
    return AdamW(trainable, lr=lr, weight_decay=weight_decay)


def warmup_steps(total_steps: int, warmup_ratio: float) -> int:
    return max(1, math.ceil(warmup_ratio * total_steps))


def build_scheduler(optimizer: AdamW, total_steps: int, warmup_ratio: float) -> LambdaLR:
    """Linear warmup to the base rate, then linear decay to zero at ``total_steps``."""
    warmup = warmup_steps(total_steps, warmup_ratio)

    def factor(step: int) -> float:
        if step < warmup:
            return (step + 1) / warmup
        if total_steps <= warmup:
            return 1.0
        return max(0.0, (total_steps - step) / (total_steps - warmup))

    return LambdaLR(optimizer, factor)


def epoch_batches(n_items: int, batch_size: int, rng: np.random.Generator) -> Iterator[List[int]]:
    """Shuffled index batches covering every item once."""
    order = rng.permutation(n_items)
    for start in range(0, n_items, batch_size):
        yield [int(i) for i in order[start : start + batch_size]]


def optimizer_step(
    model: MoELanguageModel,
    loss: torch.Tensor,
    optimizer: AdamW,
    scheduler: LambdaLR,
    grad_clip: Optional[float],
) -> None:
    if not bool(torch.isfinite(loss)):
        raise NonFiniteLossError(f"Loss became non-finite ({float(loss)})")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if grad_clip is not None:
        torch.nn.utils.clip_grad_norm_(
            [p for p in model.parameters() if p.requires_grad], grad_clip
        )
    optimizer.step()
    scheduler.step()


def pretrain(
    model_config: ModelConfig,
    samples: Sequence[TextSample],
    config: PretrainConfig,
) -> MoELanguageModel:
    """Train a fresh base model with next-token loss on every position."""
    if not samples:
        raise InputError("Pretraining corpus is empty")
    too_long = [s for s in samples if len(s.tokens) > model_config.max_seq_len]
    if too_long:
        raise InputError(
            f"{len(too_long)} pretraining sequences exceed max_seq_len "
            f"{model_config.max_seq_len}"
        )

    torch.manual_seed(config.seed)
    model = init_params(model_config, config.seed)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(samples) / config.batch_size)
    total_steps = steps_per_epoch * config.epochs
    optimizer = build_optimizer(model, config.lr, config.weight_decay)
    scheduler = build_scheduler(optimizer, total_steps, config.warmup_ratio)
    logger.info(
        f"Pretraining on {len(samples)} sequences for {config.epochs} epochs "
        f"({total_steps} steps)"
    )

    step = 0
    for epoch in range(config.epochs):
        epoch_loss = 0.0
        for indices in epoch_batches(len(samples), config.batch_size, rng):
            batch = pad_batch(
                [samples[i].tokens for i in indices], [0] * len(indices), model_config.eos_id
            )
            loss = batch_cross_entropy(model, batch)
            optimizer_step(model, loss, optimizer, scheduler, config.grad_clip)
            epoch_loss += float(loss)
            step += 1
            if step % config.log_every == 0:
                logger.info(
                    f"pretrain step {step}/{total_steps} " + format_metrics(loss=float(loss))
                )
        logger.info(f"Pretrain epoch {epoch + 1}: mean loss {epoch_loss / steps_per_epoch:.4f}")
    return model
