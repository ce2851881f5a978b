"""Toy decoder-only mixture-of-experts language model.

Every layer is a pre-norm residual block: single-head causal self-attention
followed by a routed expert feed-forward. The router records the full
post-softmax distribution over experts for each token; only the top-k
experts contribute to the output, weighted by their renormalized gates.
Everything runs in float64 on CPU.
"""

import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from pydantic import BaseModel, ConfigDict, Field, model_validator
from torch import nn

from .exceptions import DegenerateSampleError, InputError, NonFiniteLossError
from .logger import logger

DTYPE = torch.float64
RMS_EPS = 1e-6

# Router bias keyed by layer index, added to pre-softmax router logits
RouterBias = Dict[int, torch.Tensor]


class ModelConfig(BaseModel):
    """Architecture hyperparameters of the toy MoE language model."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    vocab_size: int = Field(default=96, ge=2)
    d_model: int = Field(default=48, ge=1)
    d_expert: int = Field(default=48, ge=1, description="Expert hidden width")
    n_layers: int = Field(default=6, ge=1)
    n_experts: int = Field(default=16, ge=1)
    top_k: int = Field(default=2, ge=1)
    max_seq_len: int = Field(default=24, ge=1)
    adapter_rank: int = Field(default=0, ge=0, description="0 means full fine-tuning")
    adapter_alpha: float = Field(default=32.0, gt=0)

    @model_validator(mode="after")
    def _check_top_k(self) -> "ModelConfig":
        if self.top_k > self.n_experts:
            raise ValueError(
                f"top_k ({self.top_k}) must not exceed n_experts ({self.n_experts})"
            )
        return self

    @property
    def eos_id(self) -> int:
        return self.vocab_size - 1

    @property
    def adapter_scaling(self) -> float:
        return self.adapter_alpha / self.adapter_rank if self.adapter_rank else 0.0


@dataclass(frozen=True)
class RoutingTrace:
    """Per-layer, per-token router distributions for one sequence.

    ``layers[l]`` has shape (seq_len, n_experts); ``generated_positions``
    indexes the tokens whose routing is averaged in sequence-level statistics.
    """

    layers: Tuple[torch.Tensor, ...]
    generated_positions: Tuple[int, ...] = ()

    def __post_init__(self) -> None:
        for pos in self.generated_positions:
            if not 0 <= pos < self.seq_len:
                raise InputError(
                    f"Generated position {pos} outside sequence of length {self.seq_len}"
                )

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    @property
    def seq_len(self) -> int:
        return int(self.layers[0].shape[0]) if self.layers else 0

    def with_generated(self, positions: Sequence[int]) -> "RoutingTrace":
        return RoutingTrace(layers=self.layers, generated_positions=tuple(positions))


@dataclass(frozen=True)
class DecodeResult:
    """Greedy continuation of a prompt plus the routing over prompt and continuation."""

    prompt: Tuple[int, ...]
    continuation: Tuple[int, ...]
    trace: RoutingTrace

    @property
    def tokens(self) -> Tuple[int, ...]:
        return self.prompt + self.continuation


def rms_norm(x: torch.Tensor) -> torch.Tensor:
    return x * torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + RMS_EPS)


class CausalSelfAttention(nn.Module):
    """Single-head causal attention."""

    def __init__(self, d_model: int):
        super().__init__()
        self.w_q = nn.Parameter(torch.empty(d_model, d_model, dtype=DTYPE))
        self.w_k = nn.Parameter(torch.empty(d_model, d_model, dtype=DTYPE))
        self.w_v = nn.Parameter(torch.empty(d_model, d_model, dtype=DTYPE))
        self.w_o = nn.Parameter(torch.empty(d_model, d_model, dtype=DTYPE))
        self.scale = 1.0 / math.sqrt(d_model)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        seq_len = x.shape[-2]
        q, k, v = x @ self.w_q, x @ self.w_k, x @ self.w_v
        scores = (q @ k.transpose(-1, -2)) * self.scale
        future = torch.triu(
            torch.ones(seq_len, seq_len, dtype=torch.bool, device=x.device), diagonal=1
        )
        scores = scores.masked_fill(future, float("-inf"))
        return (torch.softmax(scores, dim=-1) @ v) @ self.w_o


class MoEFeedForward(nn.Module):
    """Top-k routed expert feed-forward with optional low-rank adapters."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        n_exp, d_m, d_e, rank = (
            config.n_experts,
            config.d_model,
            config.d_expert,
            config.adapter_rank,
        )
        self.top_k = config.top_k
        self.n_experts = n_exp
        self.scaling = config.adapter_scaling
        self.router = nn.Parameter(torch.empty(d_m, n_exp, dtype=DTYPE))
        self.w_up = nn.Parameter(torch.empty(n_exp, d_m, d_e, dtype=DTYPE))
        self.w_down = nn.Parameter(torch.empty(n_exp, d_e, d_m, dtype=DTYPE))
        self.has_adapters = rank > 0
        if self.has_adapters:
            self.up_lora_a = nn.Parameter(torch.empty(n_exp, d_m, rank, dtype=DTYPE))
            self.up_lora_b = nn.Parameter(torch.empty(n_exp, rank, d_e, dtype=DTYPE))
            self.down_lora_a = nn.Parameter(torch.empty(n_exp, d_e, rank, dtype=DTYPE))
            self.down_lora_b = nn.Parameter(torch.empty(n_exp, rank, d_m, dtype=DTYPE))

    def expert_forward(self, x: torch.Tensor, expert: int) -> torch.Tensor:
        """Output of a single expert FFN, adapters included."""
        hidden = x @ self.w_up[expert]
        if self.has_adapters:
            hidden = hidden + self.scaling * (
                (x @ self.up_lora_a[expert]) @ self.up_lora_b[expert]
            )
        hidden = F.gelu(hidden)
        out = hidden @ self.w_down[expert]
        if self.has_adapters:
            out = out + self.scaling * (
                (hidden @ self.down_lora_a[expert]) @ self.down_lora_b[expert]
            )
        return out

    def route(
        self, x: torch.Tensor, bias: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        """Return (full routing distribution, top-k gate matrix), both (..., E)."""
        logits = x @ self.router
        if bias is not None:
            logits = logits + bias
        probs = torch.softmax(logits, dim=-1)
        top_vals, top_idx = probs.topk(self.top_k, dim=-1)
        top_vals = top_vals / top_vals.sum(dim=-1, keepdim=True)
        gates = torch.zeros_like(probs).scatter(-1, top_idx, top_vals)
        return probs, gates

    def forward(
        self, x: torch.Tensor, bias: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        probs, gates = self.route(x, bias)
        # Dense evaluation; zero gates give unrouted experts exactly zero gradient
        expert_out = torch.stack(
            [self.expert_forward(x, e) for e in range(self.n_experts)], dim=-2
        )
        out = (gates.unsqueeze(-1) * expert_out).sum(dim=-2)
        return out, probs


class MoEBlock(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.attn = CausalSelfAttention(config.d_model)
        self.moe = MoEFeedForward(config)

    def forward(
        self, h: torch.Tensor, bias: Optional[torch.Tensor] = None
    ) -> Tuple[torch.Tensor, torch.Tensor]:
        h = h + self.attn(rms_norm(h))
        moe_out, probs = self.moe(rms_norm(h), bias)
        return h + moe_out, probs


class MoELanguageModel(nn.Module):
    """Decoder-only MoE language model holding every trainable array."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.tok_emb = nn.Parameter(
            torch.empty(config.vocab_size, config.d_model, dtype=DTYPE)
        )
        self.pos_emb = nn.Parameter(
            torch.empty(config.max_seq_len, config.d_model, dtype=DTYPE)
        )
        self.layers = nn.ModuleList(MoEBlock(config) for _ in range(config.n_layers))
        self.head = nn.Parameter(
            torch.empty(config.d_model, config.vocab_size, dtype=DTYPE)
        )

    def check_tokens(self, tokens: torch.Tensor) -> None:
        if tokens.shape[-1] > self.config.max_seq_len:
            raise InputError(
                f"Sequence length {tokens.shape[-1]} exceeds max_seq_len "
                f"{self.config.max_seq_len}"
            )
        if tokens.numel() and (
            int(tokens.min()) < 0 or int(tokens.max()) >= self.config.vocab_size
        ):
            raise InputError(
                f"Token ids must lie in [0, {self.config.vocab_size}); "
                f"got range [{int(tokens.min())}, {int(tokens.max())}]"
            )

    def forward(
        self,
        tokens: torch.Tensor,
        router_bias: Optional[RouterBias] = None,
    ) -> Tuple[torch.Tensor, List[torch.Tensor]]:
        """Map (..., T) token ids to (..., T, V) logits and per-layer routing.

        The second element lists, per layer, the full post-softmax router
        distribution of shape (..., T, E). It stays attached to the graph so
        losses over routing can be differentiated.
        """
        self.check_tokens(tokens)
        seq_len = tokens.shape[-1]
        h = self.tok_emb[tokens] + self.pos_emb[:seq_len]
        router_probs = []
        for idx, layer in enumerate(self.layers):
            bias = router_bias.get(idx) if router_bias else None
            h, probs = layer(h, bias)
            router_probs.append(probs)
        logits = rms_norm(h) @ self.head
        return logits, router_probs

    def adapter_parameter_names(self) -> List[str]:
        return [name for name, _ in self.named_parameters() if "_lora_" in name]


def init_params(config: ModelConfig, seed: int) -> MoELanguageModel:
    """Build a model with deterministic weights for the given seed.

    Entries are drawn from N(0, 1/d_model) in parameter-registration order.
    The second adapter factor starts at zero so adapters add nothing until
    trained. With adapters present only adapter arrays stay trainable.
    """
    model = MoELanguageModel(config)
    generator = torch.Generator().manual_seed(seed)
    scale = 1.0 / math.sqrt(config.d_model)
    with torch.no_grad():
        for name, param in model.named_parameters():
            if name.endswith("_lora_b"):
                param.zero_()
            else:
                param.copy_(
                    torch.randn(param.shape, generator=generator, dtype=DTYPE) * scale
                )
    if config.adapter_rank > 0:
        for name, param in model.named_parameters():
            param.requires_grad_("_lora_" in name)
    logger.debug(f"Initialized MoE model with seed {seed}: {config.model_dump()}")
    return model


def attach_adapters(
    model: MoELanguageModel, rank: int, seed: int, alpha: Optional[float] = None
) -> MoELanguageModel:
    """Copy a trained model into a new one carrying fresh rank-``rank`` adapters."""
    if rank <= 0:
        raise InputError(f"Adapter rank must be positive, got {rank}")
    update = {"adapter_rank": rank}
    if alpha is not None:
        update["adapter_alpha"] = alpha
    config = ModelConfig(**{**model.config.model_dump(), **update})
    adapted = init_params(config, seed)
    with torch.no_grad():
        source = dict(model.named_parameters())
        for name, param in adapted.named_parameters():
            if "_lora_" not in name:
                param.copy_(source[name])
    return adapted


def forward(
    model: MoELanguageModel,
    tokens: Sequence[int],
    capture: bool = False,
    router_bias: Optional[RouterBias] = None,
) -> Tuple[torch.Tensor, Optional[RoutingTrace]]:
    """Score one token sequence.

    Returns (seq_len × vocab logits, trace or None). The trace holds the full
    post-softmax router distributions, before top-k truncation.
    """
    token_tensor = torch.as_tensor(list(tokens), dtype=torch.long)
    with torch.no_grad():
        logits, router_probs = model(token_tensor, router_bias)
    trace = RoutingTrace(layers=tuple(p.detach() for p in router_probs)) if capture else None
    return logits, trace


def cross_entropy(
    logits: torch.Tensor, targets: torch.Tensor, loss_mask: torch.Tensor
) -> torch.Tensor:
    """Mean natural-log NLL of ``targets`` over positions where ``loss_mask`` is set."""
    if logits.shape[:-1] != targets.shape or targets.shape != loss_mask.shape:
        raise InputError(
            f"Shape mismatch: logits {tuple(logits.shape)}, targets "
            f"{tuple(targets.shape)}, mask {tuple(loss_mask.shape)}"
        )
    mask = loss_mask.bool()
    if not bool(mask.any()):
        raise DegenerateSampleError("Loss mask selects no positions")
    log_probs = F.log_softmax(logits, dim=-1)
    nll = -log_probs.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return nll[mask].mean()


def gradients(
    loss: torch.Tensor, model: MoELanguageModel, retain_graph: bool = False
) -> Dict[str, torch.Tensor]:
    """Exact reverse-mode gradients of ``loss`` for every trainable array.

    Arrays the loss does not depend on get an all-zero gradient.
    """
    if not bool(torch.isfinite(loss)):
        raise NonFiniteLossError(f"Cannot differentiate non-finite loss {float(loss)}")
    named = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(
        loss, [p for _, p in named], allow_unused=True, retain_graph=retain_graph
    )
    return {
        name: grad if grad is not None else torch.zeros_like(param)
        for (name, param), grad in zip(named, grads)
    }


def response_targets(
    prompt: Sequence[int], response: Sequence[int]
) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Tokens of prompt⊕response, next-token targets and the response-only mask.

    Targets and mask are aligned with logits[:-1].
    """
    tokens = torch.as_tensor(list(prompt) + list(response), dtype=torch.long)
    mask = torch.zeros(len(tokens) - 1, dtype=torch.bool)
    mask[len(prompt) - 1 :] = True
    return tokens, tokens[1:], mask


def response_nll(
    model: MoELanguageModel, prompt: Sequence[int], response: Sequence[int]
) -> torch.Tensor:
    """Mean NLL of ``response`` given ``prompt`` (prompt tokens unscored)."""
    if not prompt:
        raise InputError("Prompt must be non-empty")
    if not response:
        raise DegenerateSampleError("Empty response has no tokens to score")
    tokens, targets, mask = response_targets(prompt, response)
    logits, _ = model(tokens)
    return cross_entropy(logits[:-1], targets, mask)


def sequence_ppl(
    model: MoELanguageModel, prompt: Sequence[int], response: Sequence[int]
) -> float:
    """Perplexity of the response tokens, prompt tokens excluded."""
    with torch.no_grad():
        # torch.exp saturates to inf instead of raising on overflow
        return float(torch.exp(response_nll(model, prompt, response)))


def greedy_decode(
    model: MoELanguageModel,
    prompt: Sequence[int],
    max_new: int,
    router_bias: Optional[RouterBias] = None,
) -> DecodeResult:
    """Argmax decoding until end-of-sequence, ``max_new`` tokens or the context limit.

    The returned trace comes from one forward pass over prompt⊕continuation,
    which is the teacher-forced routing of the generated response.
    """
    if not prompt:
        raise InputError("Prompt must be non-empty")
    eos = model.config.eos_id
    tokens = list(prompt)
    with torch.no_grad():
        for _ in range(max_new):
            if len(tokens) >= model.config.max_seq_len:
                break
            logits, _ = model(torch.as_tensor(tokens, dtype=torch.long), router_bias)
            next_token = int(torch.argmax(logits[-1]))
            tokens.append(next_token)
            if next_token == eos:
                break
    _, trace = forward(model, tokens, capture=True, router_bias=router_bias)
    assert trace is not None
    positions = range(len(prompt), len(tokens))
    return DecodeResult(
        prompt=tuple(prompt),
        continuation=tuple(tokens[len(prompt) :]),
        trace=trace.with_generated(positions),
    )
