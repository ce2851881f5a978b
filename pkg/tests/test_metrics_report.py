import math

import pytest
import torch
from scipy import stats

from src.exceptions import InputError, InsufficientDataError
from src.metrics_report import (
    DivergenceReport,
    FlopsInput,
    RunSummary,
    divergence_report,
    eval_accuracy,
    evaluate_side,
    flops_estimate,
    format_gflops,
    format_summary_table,
    pearson,
    relative_gain,
    selection_rate,
)
from src.moe_model import DTYPE, DecodeResult, RoutingTrace
from src.routing_analysis import DivergenceProfile, ExpertScore, TaskExpertMap


def _map(experts, mid_layers=(0, 0), n_experts=4):
    return TaskExpertMap(
        mid_layers=mid_layers,
        k=4,
        n_experts=n_experts,
        experts={
            layer: [ExpertScore(id=e, delta=0.1) for e in ids] for layer, ids in experts.items()
        },
    )


def _trace(rows, generated):
    return RoutingTrace(
        layers=tuple(torch.tensor(layer, dtype=DTYPE) for layer in rows),
        generated_positions=tuple(generated),
    )


class TestFlops:
    def test_reference_costs(self):
        # Arrange
        inp = FlopsInput(B=4096, L=16, K=8, d_m=2048, d_e=1024, r=16, E=64)

        # Act
        estimate = flops_estimate(inp)

        # Assert
        assert estimate.base == 6597069766656
        assert estimate.lora == 103079215104
        assert estimate.align == 8388608
        assert estimate.total == estimate.base + estimate.lora
        assert estimate.gflops()["base"] == "6597.1"
        assert estimate.gflops()["lora"] == "103.1"

    def test_no_adapters_cost_nothing(self):
        estimate = flops_estimate(FlopsInput(B=2, L=1, K=1, d_m=4, d_e=4))

        assert estimate.lora == 0
        assert estimate.base == 6 * 2 * 4 * 4

    def test_format_rounds_half_up(self):
        assert format_gflops(50_000_000) == "0.1"
        assert format_gflops(49_999_999) == "0.0"
        assert format_gflops(1_250_000_000) == "1.3"


class TestSelectionRate:
    def test_slot_counting(self):
        # Arrange: experts {0, 1} in layer 0; top-2 picks (0, 1) then (2, 1)
        trace = _trace(
            [[[0.1, 0.2, 0.3, 0.4], [0.5, 0.3, 0.1, 0.1], [0.1, 0.3, 0.5, 0.1]]], generated=[1, 2]
        )

        # Act
        rate = selection_rate([trace], _map({0: [0, 1]}), top_k=2)

        # Assert
        assert rate == pytest.approx(3 / 4)

    def test_probability_mass(self):
        trace = _trace([[[0.5, 0.3, 0.1, 0.1], [0.1, 0.3, 0.5, 0.1]]], generated=[0, 1])

        rate = selection_rate([trace], _map({0: [0, 1]}), top_k=2, mode="mass")

        assert rate == pytest.approx((0.8 + 0.4) / 2)

    def test_only_middle_layers_count_by_default(self):
        trace = _trace(
            [[[1.0, 0.0, 0.0, 0.0]], [[0.0, 0.0, 0.0, 1.0]]], generated=[0]
        )
        expert_map = _map({0: [0], 1: [0]}, mid_layers=(0, 0))

        assert selection_rate([trace], expert_map, top_k=1) == 1.0
        assert selection_rate([trace], expert_map, top_k=1, all_layers=True) == 0.5

    def test_no_generated_tokens_raise(self):
        trace = _trace([[[1.0, 0.0, 0.0, 0.0]]], generated=[])

        with pytest.raises(InsufficientDataError):
            selection_rate([trace], _map({0: [0]}), top_k=1)

    def test_empty_map_raises(self):
        trace = _trace([[[1.0, 0.0, 0.0, 0.0]]], generated=[0])

        with pytest.raises(InputError):
            selection_rate([trace], _map({0: []}), top_k=1)


class TestPearson:
    def test_matches_covariance_formula(self):
        # Arrange
        x, y = [1.0, 2.0, 3.0, 4.0], [1.0, 3.0, 2.0, 5.0]
        mx, my = sum(x) / 4, sum(y) / 4
        sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
        sxx = sum((a - mx) ** 2 for a in x)
        syy = sum((b - my) ** 2 for b in y)

        # Act
        r, p = pearson(x, y)

        # Assert
        assert r == pytest.approx(sxy / math.sqrt(sxx * syy), abs=1e-12)
        assert p == pytest.approx(stats.pearsonr(x, y)[1], rel=1e-9)

    def test_perfect_correlation_is_significant(self):
        r, p = pearson([1, 2, 3], [2, 4, 6])

        assert r == pytest.approx(1.0, abs=1e-12)
        assert p < 1e-6

    def test_anticorrelation_is_negative(self):
        r, _ = pearson([1.0, 2.0, 3.0, 4.0], [4.0, 3.5, 1.0, 0.5])

        assert -1.0 < r < -0.9

    def test_constant_input_raises(self):
        with pytest.raises(InsufficientDataError):
            pearson([1, 1, 1], [1, 2, 3])

    def test_too_few_points_raise(self):
        with pytest.raises(InsufficientDataError):
            pearson([1, 2], [2, 1])

    def test_length_mismatch_raises(self):
        with pytest.raises(InputError):
            pearson([1, 2, 3], [1, 2])


class TestRelativeGain:
    def test_gain_over_sft(self):
        assert relative_gain(0.6, 0.5) == pytest.approx(0.2)

    def test_zero_sft_accuracy_is_undefined(self):
        assert relative_gain(0.3, 0.0) is None


class TestDivergenceReport:
    def test_rows_and_middle_means(self, tmp_path):
        # Arrange
        profiles = {
            "sft": DivergenceProfile(values=[0.5, 0.2, 0.3, 0.6], n_pairs=3),
            "ra-moe": DivergenceProfile(values=[0.5, 0.1, 0.1, 0.6], n_pairs=3),
        }

        # Act
        report = divergence_report(profiles, (1, 2))
        paths = report.save(tmp_path)

        # Assert
        assert report.profile("ra-moe") == [0.5, 0.1, 0.1, 0.6]
        assert report.mid_means == pytest.approx({"sft": 0.25, "ra-moe": 0.1})
        assert DivergenceReport.load(paths["json"]) == report
        csv_lines = paths["csv"].read_text().splitlines()
        assert csv_lines[0] == "layer,method,divergence,mid_layer"
        assert csv_lines[1] == "0,sft,0.5,0"
        assert csv_lines[2] == "1,sft,0.2,1"
        assert len(csv_lines) == 9

    def test_layer_count_mismatch_raises(self):
        profiles = {
            "a": DivergenceProfile(values=[0.1, 0.2], n_pairs=1),
            "b": DivergenceProfile(values=[0.1, 0.2, 0.3], n_pairs=1),
        }

        with pytest.raises(InputError):
            divergence_report(profiles, (0, 1))

    def test_middle_layers_out_of_range_raise(self):
        profiles = {"a": DivergenceProfile(values=[0.1, 0.2], n_pairs=1)}

        with pytest.raises(InputError):
            divergence_report(profiles, (1, 3))


class TestEvaluateSide:
    def test_untrained_model_accuracy_is_a_fraction(self, tiny_model, corpus, lang_map):
        result = evaluate_side(tiny_model, corpus.eval_parallel, lang_map, side="tgt", max_new=4)

        assert 0.0 <= result.accuracy <= 1.0
        assert len(result.traces) == len(corpus.eval_parallel)
        assert result.accuracy == sum(result.correct) / len(result.correct)

    def test_oracle_decoder_is_always_correct(self, tiny_model, corpus, lang_map):
        # Arrange: a decoder that appends the gold answer
        answers = {tuple(ex.prompt_tgt): ex.gold_answer for ex in corpus.eval_parallel}

        def oracle(prompt):
            return DecodeResult(
                prompt=tuple(prompt),
                continuation=tuple(answers[tuple(prompt)]),
                trace=_trace([[[1.0]] * (len(prompt) + len(answers[tuple(prompt)]))], []),
            )

        # Act
        accuracy = eval_accuracy(
            tiny_model, corpus.eval_parallel, lang_map, side="tgt", decoder=oracle
        )

        # Assert
        assert accuracy == 1.0

    def test_unknown_side_raises(self, tiny_model, corpus, lang_map):
        with pytest.raises(InputError):
            evaluate_side(tiny_model, corpus.eval_parallel, lang_map, side="mid")

    def test_empty_eval_set_raises(self, tiny_model, lang_map):
        with pytest.raises(InputError):
            evaluate_side(tiny_model, [], lang_map)


class TestSummaryTable:
    def test_table_lists_each_run(self):
        summaries = [
            RunSummary(
                run_name="sft-tgt1-s0",
                method="sft",
                tgt_lang="tgt1",
                eval_hash="abc",
                accuracy={"src": 0.9, "tgt1": 0.4},
            ),
            RunSummary(
                run_name="ra-moe-tgt1-s0",
                method="ra-moe",
                tgt_lang="tgt1",
                eval_hash="abc",
                accuracy={"src": 0.9, "tgt1": 0.5},
                relative_gain=0.25,
                mid_divergence=0.1234,
            ),
        ]

        table = format_summary_table(summaries)

        lines = table.splitlines()
        assert lines[0].split() == [
            "run", "method", "acc[src]", "acc[tgt1]", "ci", "gain", "mid_div", "sel_rate"
        ]
        assert "+0.250" in lines[3]
        assert "0.1234" in lines[3]
        assert lines[2].split()[-1] == "-"

    def test_no_runs(self):
        assert format_summary_table([]) == "No runs to compare."
