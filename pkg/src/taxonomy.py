"""Stage 1: label parallel examples cc/ci/ic/ii by source and target correctness."""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, Field

from .exceptions import InsufficientDataError
from .logger import logger
from .moe_model import MoELanguageModel, RoutingTrace, greedy_decode, sequence_ppl
from .synth_lang import LanguageSpec, ParallelExample, TaxonomyLabel, translate

MIN_PPL_RECORDS = 4
EXCLUSION_PERCENTILE = 99.0


class Judge(str, Enum):
    EXACT = "exact"
    PPL = "ppl"


class PplRecord(BaseModel):
    """Per-example perplexities of the gold response under both prompts."""

    id: str
    ppl_src: float
    ppl_tgt: float
    excluded: Optional[str] = Field(
        default=None, description="'non-finite' or 'above-99th-percentile'"
    )

    @property
    def delta(self) -> float:
        return self.ppl_tgt - self.ppl_src


class TaxonomyReport(BaseModel):
    n_examples: int
    n_excluded: int = 0
    counts: Dict[TaxonomyLabel, int]
    proportions: Dict[TaxonomyLabel, float]

    @classmethod
    def from_labels(
        cls, labels: Sequence[Optional[TaxonomyLabel]], n_excluded: int = 0
    ) -> "TaxonomyReport":
        counts = {label: 0 for label in TaxonomyLabel}
        for label in labels:
            if label is not None:
                counts[label] += 1
        total = sum(counts.values())
        proportions = {
            label: (count / total if total else 0.0) for label, count in counts.items()
        }
        return cls(
            n_examples=total,
            n_excluded=n_excluded,
            counts=counts,
            proportions=proportions,
        )

    @property
    def ci_proportion(self) -> float:
        return self.proportions[TaxonomyLabel.CI]


@dataclass
class CategorizeResult:
    examples: List[ParallelExample]
    report: TaxonomyReport
    # example id -> (source trace, target trace) of the greedy responses
    traces: Dict[str, Tuple[RoutingTrace, RoutingTrace]]


def _final_digit_run(tokens: Sequence[int], digit_values: Mapping[int, int]) -> List[int]:
    run: List[int] = []
    for tok in reversed(tokens):
        if tok in digit_values:
            run.append(digit_values[tok])
        elif run:
            break
    return run[::-1]


def judge_exact(response: Sequence[int], gold: Sequence[int], lang: LanguageSpec) -> bool:
    """Numeric exact match of the final digit run after the last answer marker.

    ``response`` is the scored text (prompt⊕continuation, or anything that
    contains the marker); ``gold`` holds canonical digit values. Leading
    zeros are ignored. A missing marker or digit run is judged incorrect.
    """
    tokens = list(response)
    if lang.answer_marker not in tokens or not gold:
        return False
    last_marker = len(tokens) - 1 - tokens[::-1].index(lang.answer_marker)
    digits = _final_digit_run(tokens[last_marker + 1 :], lang.digit_values)
    if not digits:
        return False
    return int("".join(map(str, digits))) == int("".join(map(str, gold)))


def _nearest_rank(values: np.ndarray, percentile: float) -> float:
    ordered = np.sort(values)
    rank = max(1, math.ceil(percentile / 100.0 * len(ordered)))
    return float(ordered[rank - 1])


def ppl_taxonomy(
    records: Sequence[PplRecord],
) -> Tuple[List[PplRecord], List[Optional[TaxonomyLabel]]]:
    """Perplexity-proxy labels.

    Non-finite records and records above the nearest-rank 99th percentile of
    ppl_src or ppl_tgt are excluded before the medians are computed. Then a
    record is source-correct when ppl_src is strictly below the median of
    ppl_src, and target-incorrect when delta is strictly above the median of
    delta.

    Returns:
        (records with exclusion reasons filled in, labels aligned with input;
        None for excluded records)
    """
    annotated = [
        r.model_copy(update={"excluded": None})
        if math.isfinite(r.ppl_src) and math.isfinite(r.ppl_tgt)
        else r.model_copy(update={"excluded": "non-finite"})
        for r in records
    ]
    finite = [r for r in annotated if r.excluded is None]
    if finite:
        cap_src = _nearest_rank(np.array([r.ppl_src for r in finite]), EXCLUSION_PERCENTILE)
        cap_tgt = _nearest_rank(np.array([r.ppl_tgt for r in finite]), EXCLUSION_PERCENTILE)
        annotated = [
            r.model_copy(update={"excluded": "above-99th-percentile"})
            if r.excluded is None and (r.ppl_src > cap_src or r.ppl_tgt > cap_tgt)
            else r
            for r in annotated
        ]

    usable = [r for r in annotated if r.excluded is None]
    if len(usable) < MIN_PPL_RECORDS:
        raise InsufficientDataError(
            f"Perplexity judge needs at least {MIN_PPL_RECORDS} usable records, "
            f"got {len(usable)} of {len(records)}"
        )

    median_src = float(np.median([r.ppl_src for r in usable]))
    median_delta = float(np.median([r.delta for r in usable]))
    labels: List[Optional[TaxonomyLabel]] = []
    for r in annotated:
        if r.excluded is not None:
            labels.append(None)
            continue
        src_correct = r.ppl_src < median_src
        tgt_correct = not r.delta > median_delta
        labels.append(TaxonomyLabel.from_correctness(src_correct, tgt_correct))

    n_excluded = len(annotated) - len(usable)
    if n_excluded:
        logger.warning(f"Perplexity judge excluded {n_excluded} of {len(records)} records")
    return annotated, labels


def gold_response(example: ParallelExample, lang: LanguageSpec, eos_id: int) -> List[int]:
    """Gold answer digits plus end-of-sequence, in ``lang`` tokens."""
    return translate(list(example.gold_answer) + [eos_id], lang)


def build_ppl_records(
    model: MoELanguageModel,
    examples: Sequence[ParallelExample],
    langs: Mapping[str, LanguageSpec],
) -> List[PplRecord]:
    eos = model.config.eos_id
    records = []
    for ex in examples:
        src, tgt = langs[ex.src_lang], langs[ex.tgt_lang]
        records.append(
            PplRecord(
                id=ex.id,
                ppl_src=sequence_ppl(model, ex.prompt_src, gold_response(ex, src, eos)),
                ppl_tgt=sequence_ppl(model, ex.prompt_tgt, gold_response(ex, tgt, eos)),
            )
        )
    return records


def categorize(
    examples: Sequence[ParallelExample],
    model: MoELanguageModel,
    langs: Mapping[str, LanguageSpec],
    max_new: int,
    judge: Judge = Judge.EXACT,
) -> CategorizeResult:
    """Decode both prompts of every example and assign cc/ci/ic/ii.

    Args:
        examples: Parallel examples (labels, if any, are recomputed)
        model: Model whose responses are judged
        langs: Languages by name
        max_new: Decoding budget per prompt
        judge: Exact-match judging, or the perplexity proxy

    Returns:
        Labeled copies of the examples, the proportion report and the
        routing traces of both greedy responses
    """
    labeled: List[ParallelExample] = []
    traces: Dict[str, Tuple[RoutingTrace, RoutingTrace]] = {}
    for ex in examples:
        src, tgt = langs[ex.src_lang], langs[ex.tgt_lang]
        out_src = greedy_decode(model, ex.prompt_src, max_new)
        out_tgt = greedy_decode(model, ex.prompt_tgt, max_new)
        traces[ex.id] = (out_src.trace, out_tgt.trace)
        update = {
            "response_src": list(out_src.continuation),
            "response_tgt": list(out_tgt.continuation),
            "label": None,
        }
        if judge is Judge.EXACT:
            update["label"] = TaxonomyLabel.from_correctness(
                judge_exact(out_src.tokens, ex.gold_answer, src),
                judge_exact(out_tgt.tokens, ex.gold_answer, tgt),
            )
        labeled.append(ex.model_copy(update=update))

    n_excluded = 0
    if judge is Judge.PPL:
        records, labels = ppl_taxonomy(build_ppl_records(model, labeled, langs))
        labeled = [
            ex.model_copy(
                update={
                    "label": label,
                    "ppl_src": rec.ppl_src,
                    "ppl_tgt": rec.ppl_tgt,
                    "ppl_excluded": rec.excluded,
                }
            )
            for ex, rec, label in zip(labeled, records, labels)
        ]
        n_excluded = sum(1 for label in labels if label is None)

    report = TaxonomyReport.from_labels([ex.label for ex in labeled], n_excluded)
    summary = ", ".join(f"{k.value}={v:.3f}" for k, v in report.proportions.items())
    logger.info(f"Taxonomy over {report.n_examples} examples: {summary}")
    return CategorizeResult(examples=labeled, report=report, traces=traces)
