"""Synthetic parallel task corpora in toy languages.

Token layout with shared symbols: digits 0-9 are tokens 0-9, ``+`` is 10 and
the answer marker ``=`` is 11; every language owns a block of word tokens
after that, and the end-of-sequence token (vocab_size - 1) is shared. The
first language is the source: its bijection is the identity, so canonical
task tokens are source-language tokens and gold answers are digit values.
"""

from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from .artifacts import read_json, read_jsonl, write_json, write_jsonl
from .exceptions import ConfigurationError, InputError
from .logger import logger

N_DIGITS = 10
PLUS = 10
MARKER = 11
N_SYMBOLS = 12

# Canonical word indices with a fixed role; the rest are fillers
WORD_WHAT, WORD_IS, WORD_COPY, WORD_LARGER, WORD_AND = range(5)
N_TASK_WORDS = 5


class TaskKind(str, Enum):
    MODULAR_ADDITION = "modular-addition"
    SEQUENCE_COPY = "sequence-copy"
    COMPARISON = "comparison"


class TaxonomyLabel(str, Enum):
    """Correctness in (source, target): c = correct, i = incorrect."""

    CC = "cc"
    CI = "ci"
    IC = "ic"
    II = "ii"

    @classmethod
    def from_correctness(cls, src_correct: bool, tgt_correct: bool) -> "TaxonomyLabel":
        return cls(("c" if src_correct else "i") + ("c" if tgt_correct else "i"))


class LanguageSpec(BaseModel):
    """A toy language: its tokens and the map from canonical tokens into them."""

    model_config = ConfigDict(frozen=True)

    name: str
    token_alphabet: List[int]
    answer_marker: int
    digit_tokens: List[int] = Field(description="Token for each digit value 0-9")
    bijection: Dict[int, int]

    @model_validator(mode="after")
    def _check_bijection(self) -> "LanguageSpec":
        if len(set(self.bijection.values())) != len(self.bijection):
            raise ValueError(f"Bijection of language {self.name} is not injective")
        if len(self.digit_tokens) != N_DIGITS:
            raise ValueError(f"Language {self.name} needs exactly {N_DIGITS} digit tokens")
        return self

    @property
    def inverse(self) -> Dict[int, int]:
        return {v: k for k, v in self.bijection.items()}

    @property
    def digit_values(self) -> Dict[int, int]:
        return {tok: value for value, tok in enumerate(self.digit_tokens)}

    def symbol_tokens(self) -> List[int]:
        return [self.bijection[c] for c in range(N_SYMBOLS)]

    def word_tokens(self) -> List[int]:
        symbols = set(self.symbol_tokens())
        return [t for t in self.token_alphabet if t not in symbols]


class CorpusConfig(BaseModel):
    """Sizes, task and seed of a synthetic corpus."""

    model_config = ConfigDict(extra="forbid")

    task: TaskKind = TaskKind.MODULAR_ADDITION
    n_languages: int = Field(default=2, ge=2)
    n_words: int = Field(default=40, ge=N_TASK_WORDS + 1, description="Word tokens per language")
    shared_symbols: bool = True
    n_pretrain_src: int = Field(default=20000, ge=1)
    n_pretrain_tgt: int = Field(default=2000, ge=0)
    n_task: int = Field(default=2000, ge=1)
    n_eval: int = Field(default=500, ge=1)
    n_general: int = Field(default=200, ge=1, description="Held-out source filler sentences")
    task_fraction: float = Field(default=0.8, ge=0.0, le=1.0)
    modulus: int = Field(default=10, ge=2)
    copy_length: Tuple[int, int] = (3, 5)
    max_fillers: int = Field(default=3, ge=1)
    sentence_length: Tuple[int, int] = (4, 10)
    seed: int = 42


class ParallelExample(BaseModel):
    """A source prompt, its target-language image and the gold answer."""

    id: str
    src_lang: str
    tgt_lang: str
    prompt_src: List[int]
    prompt_tgt: List[int]
    gold_answer: List[int] = Field(description="Canonical digit values")
    response_src: Optional[List[int]] = None
    response_tgt: Optional[List[int]] = None
    label: Optional[TaxonomyLabel] = None
    ppl_src: Optional[float] = None
    ppl_tgt: Optional[float] = None
    ppl_excluded: Optional[str] = None


class TextSample(BaseModel):
    lang: str
    tokens: List[int]


class Corpus(BaseModel):
    pretrain: List[TextSample]
    task_parallel: List[ParallelExample]
    eval_parallel: List[ParallelExample]
    general: List[TextSample]

    def for_target(self, split: str, tgt_lang: str) -> List[ParallelExample]:
        examples: List[ParallelExample] = getattr(self, split)
        return [ex for ex in examples if ex.tgt_lang == tgt_lang]


class LanguageFactory:
    """Factory for LanguageSpec objects laid out in a shared vocabulary."""

    @staticmethod
    def create_language(
        name: str, index: int, config: CorpusConfig, vocab_size: int
    ) -> LanguageSpec:
        """Create the ``index``-th language; index 0 is the source language.

        Args:
            name: Language name
            index: Position of the language in the vocabulary layout
            config: Corpus configuration (word count, symbol sharing, seed)
            vocab_size: Model vocabulary size

        Returns:
            A LanguageSpec whose bijection maps source tokens to this language
        """
        eos = vocab_size - 1
        if config.shared_symbols:
            symbols_start = 0
            words_start = N_SYMBOLS + index * config.n_words
        else:
            symbols_start = index * (N_SYMBOLS + config.n_words)
            words_start = symbols_start + N_SYMBOLS
        words_end = words_start + config.n_words
        if words_end > eos:
            raise ConfigurationError(
                f"Vocabulary of size {vocab_size} cannot hold language {name} "
                f"(needs tokens up to {words_end - 1} plus end-of-sequence)"
            )

        symbol_tokens = list(range(symbols_start, symbols_start + N_SYMBOLS))
        word_tokens = list(range(words_start, words_end))
        if index > 0:
            # Word order is scrambled so the map is not a plain offset
            rng = np.random.default_rng(config.seed + index)
            word_tokens = [word_tokens[i] for i in rng.permutation(config.n_words)]

        bijection = {i: symbol_tokens[i] for i in range(N_SYMBOLS)}
        bijection.update(
            {N_SYMBOLS + i: word_tokens[i] for i in range(config.n_words)}
        )
        bijection[eos] = eos
        return LanguageSpec(
            name=name,
            token_alphabet=sorted(set(symbol_tokens) | set(word_tokens)),
            answer_marker=symbol_tokens[MARKER],
            digit_tokens=symbol_tokens[:N_DIGITS],
            bijection=bijection,
        )

    @staticmethod
    def create_all_languages(config: CorpusConfig, vocab_size: int) -> List[LanguageSpec]:
        """Create the source language ``src`` and targets ``tgt1``, ``tgt2``, ..."""
        names = ["src"] + [f"tgt{i}" for i in range(1, config.n_languages)]
        return [
            LanguageFactory.create_language(name, i, config, vocab_size)
            for i, name in enumerate(names)
        ]


def translate(tokens: Sequence[int], lang_tgt: LanguageSpec) -> List[int]:
    """Token-wise image of a source-language sequence in ``lang_tgt``."""
    try:
        return [lang_tgt.bijection[t] for t in tokens]
    except KeyError as e:
        raise InputError(f"Token {e.args[0]} has no image in language {lang_tgt.name}") from e


def inverse_translate(tokens: Sequence[int], lang: LanguageSpec) -> List[int]:
    inverse = lang.inverse
    try:
        return [inverse[t] for t in tokens]
    except KeyError as e:
        raise InputError(f"Token {e.args[0]} is not a {lang.name} token") from e


def encode_number(value: int) -> List[int]:
    """Canonical digit tokens of a non-negative integer."""
    return [int(ch) for ch in str(value)]


def decode_number(tokens: Sequence[int]) -> int:
    return int("".join(str(t) for t in tokens))


def check_disjoint_alphabets(langs: Sequence[LanguageSpec], shared_symbols: bool) -> None:
    """Word tokens (and symbols unless shared) must not overlap across languages."""
    seen: Dict[int, str] = {}
    for lang in langs:
        private = lang.word_tokens() if shared_symbols else lang.token_alphabet
        for tok in private:
            if tok in seen:
                raise ConfigurationError(
                    f"Token {tok} belongs to both {seen[tok]} and {lang.name}"
                )
            seen[tok] = lang.name


class _TaskSampler:
    """Draws canonical prompts and answers with a shared numpy generator."""

    def __init__(self, config: CorpusConfig, rng: np.random.Generator):
        self.config = config
        self.rng = rng
        self.fillers = [N_SYMBOLS + i for i in range(N_TASK_WORDS, config.n_words)]

    def _word(self, index: int) -> int:
        return N_SYMBOLS + index

    def _filler_prefix(self) -> List[int]:
        count = int(self.rng.integers(1, self.config.max_fillers + 1))
        return [self.fillers[i] for i in self.rng.integers(0, len(self.fillers), count)]

    def sample(self) -> Tuple[List[int], List[int]]:
        """Return (canonical prompt, answer digit values)."""
        cfg = self.config
        prefix = self._filler_prefix()
        if cfg.task is TaskKind.MODULAR_ADDITION:
            a, b = (int(v) for v in self.rng.integers(0, cfg.modulus, 2))
            body = [self._word(WORD_WHAT), self._word(WORD_IS)]
            body += encode_number(a) + [PLUS] + encode_number(b)
            answer = encode_number((a + b) % cfg.modulus)
        elif cfg.task is TaskKind.SEQUENCE_COPY:
            length = int(self.rng.integers(cfg.copy_length[0], cfg.copy_length[1] + 1))
            digits = [int(d) for d in self.rng.integers(0, N_DIGITS, length)]
            body = [self._word(WORD_COPY)] + digits
            answer = digits
        else:
            a, b = (int(v) for v in self.rng.integers(0, cfg.modulus, 2))
            body = [self._word(WORD_LARGER)] + encode_number(a)
            body += [self._word(WORD_AND)] + encode_number(b)
            answer = encode_number(max(a, b))
        return prefix + body + [MARKER], answer

    def sentence(self) -> List[int]:
        low, high = self.config.sentence_length
        length = int(self.rng.integers(low, high + 1))
        return [self.fillers[i] for i in self.rng.integers(0, len(self.fillers), length)]


def gen_corpus(config: CorpusConfig, langs: Sequence[LanguageSpec], eos_id: int) -> Corpus:
    """Generate pretraining text plus disjoint parallel task and eval splits.

    Args:
        config: Corpus configuration
        langs: Languages; the first is the source
        eos_id: End-of-sequence token appended to answers and sentences

    Returns:
        The generated Corpus (deterministic for ``config.seed``)
    """
    if len(langs) < 2:
        raise ConfigurationError("At least two languages are required")
    check_disjoint_alphabets(langs, config.shared_symbols)

    rng = np.random.default_rng(config.seed)
    sampler = _TaskSampler(config, rng)
    src, targets = langs[0], list(langs[1:])

    # Task and eval prompts are unique across both splits
    wanted = config.n_task + config.n_eval
    prompts: Dict[Tuple[int, ...], List[int]] = {}
    attempts = 0
    while len(prompts) < wanted:
        attempts += 1
        if attempts > 50 * wanted:
            raise ConfigurationError(
                f"Could only draw {len(prompts)} distinct prompts of {wanted} requested"
            )
        prompt, answer = sampler.sample()
        prompts.setdefault(tuple(prompt), answer)

    task_parallel: List[ParallelExample] = []
    eval_parallel: List[ParallelExample] = []
    for i, (prompt, answer) in enumerate(prompts.items()):
        if i < config.n_task:
            split, prefix, index = task_parallel, "task", i
        else:
            split, prefix, index = eval_parallel, "eval", i - config.n_task
        for tgt in targets:
            split.append(
                ParallelExample(
                    id=f"{prefix}-{index:05d}-{tgt.name}",
                    src_lang=src.name,
                    tgt_lang=tgt.name,
                    prompt_src=translate(prompt, src),
                    prompt_tgt=translate(prompt, tgt),
                    gold_answer=list(answer),
                )
            )

    def pretrain_sample(lang: LanguageSpec) -> TextSample:
        if rng.random() < config.task_fraction:
            prompt, answer = sampler.sample()
            canonical = prompt + answer + [eos_id]
        else:
            canonical = sampler.sentence() + [eos_id]
        return TextSample(lang=lang.name, tokens=translate(canonical, lang))

    pretrain = [pretrain_sample(src) for _ in range(config.n_pretrain_src)]
    # Target text is drawn by token budget so the token ratio tracks the sample ratio
    budget = token_counts_by_language(pretrain)[src.name] * (
        config.n_pretrain_tgt / config.n_pretrain_src
    )
    for tgt in targets:
        drawn = 0
        while drawn < budget:
            sample = pretrain_sample(tgt)
            pretrain.append(sample)
            drawn += len(sample.tokens)
    counts = token_counts_by_language(pretrain)
    pretrain = [pretrain[i] for i in rng.permutation(len(pretrain))]

    general = [
        TextSample(lang=src.name, tokens=translate(sampler.sentence() + [eos_id], src))
        for _ in range(config.n_general)
    ]

    logger.info(
        f"Generated corpus: {len(pretrain)} pretrain, {len(task_parallel)} task, "
        f"{len(eval_parallel)} eval, {len(general)} general sequences; "
        f"pretrain tokens per language {counts}"
    )
    return Corpus(
        pretrain=pretrain,
        task_parallel=task_parallel,
        eval_parallel=eval_parallel,
        general=general,
    )


def token_counts_by_language(samples: Sequence[TextSample]) -> Dict[str, int]:
    counts: Dict[str, int] = {}
    for sample in samples:
        counts[sample.lang] = counts.get(sample.lang, 0) + len(sample.tokens)
    return counts


def save_languages(langs: Sequence[LanguageSpec], path: Path) -> None:
    write_json(path, {"languages": [lang.model_dump(mode="json") for lang in langs]})


def load_languages(path: Path) -> List[LanguageSpec]:
    return [LanguageSpec(**entry) for entry in read_json(path)["languages"]]


def save_corpus(corpus: Corpus, directory: Path) -> Dict[str, Path]:
    """Write each split as JSONL; returns split name -> path."""
    paths = {}
    for split in ("pretrain", "task_parallel", "eval_parallel", "general"):
        paths[split] = write_jsonl(directory / f"{split}.jsonl", getattr(corpus, split))
    return paths


def load_corpus(directory: Path) -> Corpus:
    return Corpus(
        pretrain=read_jsonl(directory / "pretrain.jsonl", TextSample),
        task_parallel=read_jsonl(directory / "task_parallel.jsonl", ParallelExample),
        eval_parallel=read_jsonl(directory / "eval_parallel.jsonl", ParallelExample),
        general=read_jsonl(directory / "general.jsonl", TextSample),
    )
