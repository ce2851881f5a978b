import numpy as np
import pytest
import torch
from torch import nn

from src.exceptions import InputError, NonFiniteLossError
from src.moe_model import DTYPE
from src.training import (
    PretrainConfig,
    build_optimizer,
    build_scheduler,
    epoch_batches,
    optimizer_step,
    pad_batch,
    pretrain,
    warmup_steps,
)


class _Pair(nn.Module):
    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.tensor([0.5, -1.0], dtype=DTYPE))


class TestPadBatch:
    def test_pads_right_and_masks_scored_positions(self):
        batch = pad_batch([[1, 2, 3, 4], [5, 6]], loss_starts=[2, 0], pad_id=9)

        assert batch.tokens.tolist() == [[1, 2, 3, 4], [5, 6, 9, 9]]
        assert batch.targets.tolist() == [[2, 3, 4], [6, 9, 9]]
        assert batch.loss_mask.tolist() == [[False, False, True], [True, False, False]]

    def test_empty_input_raises(self):
        with pytest.raises(InputError):
            pad_batch([], [], pad_id=0)


class TestScheduler:
    def test_warmup_then_linear_decay(self):
        # Arrange
        module = _Pair()
        optimizer = build_optimizer(module, lr=1.0)
        scheduler = build_scheduler(optimizer, total_steps=10, warmup_ratio=0.2)

        # Act
        rates = []
        for _ in range(10):
            rates.append(optimizer.param_groups[0]["lr"])
            optimizer.step()
            scheduler.step()

        # Assert
        assert warmup_steps(10, 0.2) == 2
        assert rates == pytest.approx([0.5, 1.0, 1.0, 0.875, 0.75, 0.625, 0.5, 0.375, 0.25, 0.125])

    def test_warmup_is_at_least_one_step(self):
        assert warmup_steps(10, 0.0) == 1


class TestOptimizerStep:
    def test_first_step_matches_adam_update_rule(self):
        # Arrange
        module = _Pair()
        optimizer = build_optimizer(module, lr=0.1)
        scheduler = build_scheduler(optimizer, total_steps=10, warmup_ratio=0.03)
        start = module.w.detach().clone()
        grad = torch.tensor([3.0, -2.0], dtype=DTYPE)
        loss = (module.w * grad).sum()

        # Act
        optimizer_step(module, loss, optimizer, scheduler, grad_clip=None)

        # Assert: bias-corrected moments equal g and g^2 after one step
        expected = start - 0.1 * grad / (grad.abs() + 1e-8)
        assert torch.allclose(module.w.detach(), expected, rtol=0, atol=1e-12)

    def test_non_finite_loss_raises(self):
        module = _Pair()
        optimizer = build_optimizer(module, lr=0.1)
        scheduler = build_scheduler(optimizer, total_steps=1, warmup_ratio=0.0)

        with pytest.raises(NonFiniteLossError):
            optimizer_step(
                module, module.w.sum() * float("inf"), optimizer, scheduler, grad_clip=None
            )


class TestEpochBatches:
    def test_covers_every_item_once(self):
        batches = list(epoch_batches(10, 4, np.random.default_rng(0)))

        assert [len(b) for b in batches] == [4, 4, 2]
        assert sorted(i for b in batches for i in b) == list(range(10))


class TestPretrain:
    def test_same_seed_gives_identical_models(self, tiny_config, corpus):
        config = PretrainConfig(epochs=1, batch_size=16, seed=5)

        first = pretrain(tiny_config, corpus.pretrain, config)
        second = pretrain(tiny_config, corpus.pretrain, config)

        for (name, a), (_, b) in zip(first.named_parameters(), second.named_parameters()):
            assert torch.equal(a, b), name

    def test_empty_corpus_raises(self, tiny_config):
        with pytest.raises(InputError):
            pretrain(tiny_config, [], PretrainConfig())
