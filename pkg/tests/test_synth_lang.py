import pytest

from src.exceptions import ConfigurationError, InputError
from src.synth_lang import (
    MARKER,
    N_SYMBOLS,
    PLUS,
    LanguageFactory,
    TaskKind,
    TaxonomyLabel,
    check_disjoint_alphabets,
    decode_number,
    encode_number,
    gen_corpus,
    inverse_translate,
    load_corpus,
    load_languages,
    save_corpus,
    save_languages,
    token_counts_by_language,
    translate,
)
from tests.conftest import TINY_VOCAB

EOS = TINY_VOCAB - 1


def _digits_before(tokens, index):
    digits = []
    while index >= 0 and tokens[index] < 10:
        digits.insert(0, tokens[index])
        index -= 1
    return digits


class TestLanguageFactory:
    def test_source_bijection_is_identity(self, languages):
        src = languages[0]

        assert src.name == "src"
        assert all(src.bijection[t] == t for t in src.token_alphabet)

    def test_target_words_are_disjoint_and_symbols_shared(self, languages):
        src, tgt = languages

        assert tgt.name == "tgt1"
        assert not set(src.word_tokens()) & set(tgt.word_tokens())
        assert tgt.symbol_tokens() == src.symbol_tokens()
        assert tgt.answer_marker == MARKER

    def test_target_word_map_is_scrambled_within_its_block(self, corpus_config, languages):
        tgt = languages[1]
        start = N_SYMBOLS + corpus_config.n_words

        images = [tgt.bijection[N_SYMBOLS + i] for i in range(corpus_config.n_words)]

        assert sorted(images) == list(range(start, start + corpus_config.n_words))

    def test_private_symbols_get_their_own_block(self, corpus_config):
        # Arrange
        config = corpus_config.model_copy(update={"shared_symbols": False})

        # Act
        langs = LanguageFactory.create_all_languages(config, vocab_size=64)

        # Assert
        check_disjoint_alphabets(langs, shared_symbols=False)
        assert langs[1].digit_tokens[0] == N_SYMBOLS + config.n_words

    def test_vocabulary_too_small_raises(self, corpus_config):
        with pytest.raises(ConfigurationError):
            LanguageFactory.create_all_languages(corpus_config, vocab_size=20)

    def test_overlapping_alphabets_raise(self, languages):
        with pytest.raises(ConfigurationError):
            check_disjoint_alphabets([languages[0], languages[0]], shared_symbols=True)


class TestTranslate:
    def test_round_trip_is_identity(self, corpus, languages):
        tgt = languages[1]
        for ex in corpus.task_parallel:
            assert inverse_translate(translate(ex.prompt_src, tgt), tgt) == ex.prompt_src

    def test_empty_sequence(self, languages):
        assert translate([], languages[1]) == []

    def test_fixed_prompt_against_map_table(self, languages):
        # Arrange
        tgt = languages[1]
        prompt = [N_SYMBOLS, N_SYMBOLS + 1, 3, PLUS, 4]
        table = {N_SYMBOLS: tgt.bijection[N_SYMBOLS], N_SYMBOLS + 1: tgt.bijection[N_SYMBOLS + 1]}

        # Act
        translated = translate(prompt, tgt)

        # Assert
        assert translated == [table[N_SYMBOLS], table[N_SYMBOLS + 1], 3, PLUS, 4]
        assert len(translated) == len(prompt)

    def test_unmapped_token_raises(self, languages):
        with pytest.raises(InputError):
            translate([TINY_VOCAB + 5], languages[1])

    def test_inverse_of_foreign_token_raises(self, languages):
        src_word = languages[0].word_tokens()[0]

        with pytest.raises(InputError):
            inverse_translate([src_word], languages[1])


class TestNumbers:
    def test_encode_decode(self):
        assert encode_number(0) == [0]
        assert encode_number(407) == [4, 0, 7]
        assert decode_number([0, 0, 7]) == 7


class TestGenCorpus:
    def test_sizes_and_ids(self, corpus, corpus_config):
        assert len(corpus.task_parallel) == corpus_config.n_task
        assert len(corpus.eval_parallel) == corpus_config.n_eval
        assert len(corpus.general) == corpus_config.n_general
        assert sum(s.lang == "src" for s in corpus.pretrain) == corpus_config.n_pretrain_src
        assert corpus.task_parallel[0].id == "task-00000-tgt1"
        assert corpus.eval_parallel[0].id == "eval-00000-tgt1"

    def test_same_seed_is_deterministic(self, corpus_config, languages):
        first = gen_corpus(corpus_config, languages, EOS)
        second = gen_corpus(corpus_config, languages, EOS)

        assert first == second

    def test_targets_are_bijective_images(self, corpus, languages):
        tgt = languages[1]
        for ex in corpus.task_parallel + corpus.eval_parallel:
            assert ex.prompt_tgt == translate(ex.prompt_src, tgt)

    def test_task_and_eval_prompts_are_disjoint(self, corpus):
        task = {tuple(ex.prompt_src) for ex in corpus.task_parallel}
        evaluation = {tuple(ex.prompt_src) for ex in corpus.eval_parallel}

        assert not task & evaluation

    def test_modular_addition_answers_match_arithmetic(self, corpus, corpus_config):
        for ex in corpus.task_parallel + corpus.eval_parallel:
            # Arrange
            tokens = ex.prompt_src
            plus = tokens.index(PLUS)
            a = decode_number(_digits_before(tokens, plus - 1))
            b = decode_number(tokens[plus + 1 : tokens.index(MARKER)])

            # Assert
            assert decode_number(ex.gold_answer) == (a + b) % corpus_config.modulus

    @pytest.mark.parametrize("n_src, n_tgt", [(40, 4), (300, 30), (120, 60)])
    def test_pretrain_token_ratio_matches_configured_ratio(
        self, corpus_config, languages, n_src, n_tgt
    ):
        # Arrange
        config = corpus_config.model_copy(
            update={"n_pretrain_src": n_src, "n_pretrain_tgt": n_tgt}
        )

        # Act
        corpus = gen_corpus(config, languages, EOS)

        # Assert
        counts = token_counts_by_language(corpus.pretrain)
        budget = counts["src"] * n_tgt / n_src
        longest_tgt = max(len(s.tokens) for s in corpus.pretrain if s.lang == "tgt1")
        assert budget <= counts["tgt1"] < budget + longest_tgt

    def test_no_target_pretraining(self, corpus_config, languages):
        config = corpus_config.model_copy(update={"n_pretrain_tgt": 0})

        corpus = gen_corpus(config, languages, EOS)

        counts = token_counts_by_language(corpus.pretrain)
        assert set(counts) == {"src"}
        tgt_words = set(languages[1].word_tokens())
        assert not any(set(s.tokens) & tgt_words for s in corpus.pretrain)

    def test_pretraining_text_ends_with_eos(self, corpus):
        assert all(sample.tokens[-1] == EOS for sample in corpus.pretrain + corpus.general)

    def test_sequence_copy_answers_repeat_the_digits(self, corpus_config, languages):
        config = corpus_config.model_copy(update={"task": TaskKind.SEQUENCE_COPY})

        corpus = gen_corpus(config, languages, EOS)

        for ex in corpus.task_parallel:
            marker = ex.prompt_src.index(MARKER)
            assert ex.gold_answer == _digits_before(ex.prompt_src, marker - 1)
            assert 3 <= len(ex.gold_answer) <= 5

    def test_comparison_answers_are_the_maximum(self, corpus_config, languages):
        config = corpus_config.model_copy(update={"task": TaskKind.COMPARISON})

        corpus = gen_corpus(config, languages, EOS)

        for ex in corpus.task_parallel:
            marker = ex.prompt_src.index(MARKER)
            b = decode_number(_digits_before(ex.prompt_src, marker - 1))
            a_end = marker - 1 - len(str(b)) - 1
            a = decode_number(_digits_before(ex.prompt_src, a_end))
            assert decode_number(ex.gold_answer) == max(a, b)

    def test_too_many_prompts_requested_raises(self, corpus_config, languages):
        # Three fillers and modulus 2 allow 156 distinct prompts
        config = corpus_config.model_copy(update={"n_task": 200, "modulus": 2})

        with pytest.raises(ConfigurationError):
            gen_corpus(config, languages, EOS)

    def test_single_language_raises(self, corpus_config, languages):
        with pytest.raises(ConfigurationError):
            gen_corpus(corpus_config, languages[:1], EOS)


class TestCorpusFiles:
    def test_corpus_and_languages_round_trip(self, corpus, languages, tmp_path):
        # Act
        save_corpus(corpus, tmp_path)
        save_languages(languages, tmp_path / "languages.json")

        # Assert
        assert load_corpus(tmp_path) == corpus
        assert load_languages(tmp_path / "languages.json") == languages

    def test_for_target_filters_by_language(self, corpus):
        assert corpus.for_target("task_parallel", "tgt1") == corpus.task_parallel
        assert corpus.for_target("task_parallel", "tgt9") == []


class TestTaxonomyLabel:
    @pytest.mark.parametrize(
        "src,tgt,label",
        [
            (True, True, TaxonomyLabel.CC),
            (True, False, TaxonomyLabel.CI),
            (False, True, TaxonomyLabel.IC),
            (False, False, TaxonomyLabel.II),
        ],
    )
    def test_from_correctness(self, src, tgt, label):
        assert TaxonomyLabel.from_correctness(src, tgt) is label
