from typing import Dict, List

import pytest

from src.moe_model import ModelConfig, MoELanguageModel, init_params
from src.synth_lang import (
    Corpus,
    CorpusConfig,
    LanguageFactory,
    LanguageSpec,
    gen_corpus,
)

TINY_VOCAB = 32


@pytest.fixture
def tiny_config() -> ModelConfig:
    return ModelConfig(
        vocab_size=TINY_VOCAB,
        d_model=8,
        d_expert=8,
        n_layers=2,
        n_experts=4,
        top_k=2,
        max_seq_len=24,
    )


@pytest.fixture
def tiny_model(tiny_config) -> MoELanguageModel:
    return init_params(tiny_config, seed=0)


@pytest.fixture
def corpus_config() -> CorpusConfig:
    return CorpusConfig(
        n_words=8,
        n_pretrain_src=40,
        n_pretrain_tgt=4,
        n_task=12,
        n_eval=6,
        n_general=5,
        seed=3,
    )


@pytest.fixture
def languages(corpus_config) -> List[LanguageSpec]:
    return LanguageFactory.create_all_languages(corpus_config, TINY_VOCAB)


@pytest.fixture
def lang_map(languages) -> Dict[str, LanguageSpec]:
    return {lang.name: lang for lang in languages}


@pytest.fixture
def corpus(corpus_config, languages) -> Corpus:
    return gen_corpus(corpus_config, languages, eos_id=TINY_VOCAB - 1)
