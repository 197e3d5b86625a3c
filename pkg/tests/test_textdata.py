import math

import numpy as np
import pytest
import sacrebleu

from errors import ConfigError, ParseError, RangeError
from numerics import make_rng
from textdata import (
    CLS,
    SEP,
    SEQ2SEQ_SOURCE,
    SPECIAL_TOKENS,
    UNK,
    LabeledCorpus,
    SynonymTable,
    TriggerSpec,
    Vocabulary,
    bleu,
    build_vocab,
    cipher,
    corpus_bleu_mean,
    default_synonyms,
    detokenize,
    ids_to_words,
    load_corpus,
    load_synonyms,
    load_word_lists,
    poison,
    synth_classification,
    synth_seq2seq,
    tokenize,
    write_corpus,
    write_synonyms,
)


def test_build_vocab_orders_by_frequency_then_word():
    vocab = build_vocab(LabeledCorpus((("good movie", 1), ("bad movie", 0))))
    assert vocab.tokens == SPECIAL_TOKENS + ("movie", "bad", "good")
    assert all(vocab.is_special(vocab.id_of(t)) for t in SPECIAL_TOKENS)


def test_build_vocab_min_count():
    vocab = build_vocab(LabeledCorpus((("good movie", 1), ("bad movie", 0))), min_count=2)
    assert "movie" in vocab
    assert vocab.id_of("good") == vocab.unk_id


def test_vocabulary_rejects_bad_layouts():
    with pytest.raises(ConfigError):
        Vocabulary.from_tokens(["good"])
    with pytest.raises(ConfigError):
        Vocabulary.from_tokens(list(SPECIAL_TOKENS) + ["a", "a"])
    with pytest.raises(ConfigError):
        build_vocab(LabeledCorpus(()))


def test_tokenize_classification_framing(vocab):
    seq = tokenize("good movie", vocab)
    assert ids_to_words(seq.ids, vocab) == [CLS, "good", "movie", SEP]
    assert seq.special_mask == (True, False, False, True)
    assert seq.source_words == (-1, 0, 1, -1)
    assert seq.non_special_count == 2


def test_tokenize_unknown_word(vocab):
    seq = tokenize("zzz movie", vocab)
    assert ids_to_words(seq.ids, vocab) == [CLS, UNK, "movie", SEP]
    assert detokenize(seq, vocab) == f"{UNK} movie"


def test_tokenize_seq2seq_source_appends_eos(vocab):
    seq = tokenize("good movie", vocab, SEQ2SEQ_SOURCE)
    assert seq.ids == (vocab.id_of("good"), vocab.id_of("movie"), vocab.eos_id)
    assert seq.special_mask == (False, False, True)


def test_tokenize_truncates(vocab):
    seq = tokenize("the good movie is a fine plot", vocab, max_len=5)
    assert len(seq) == 5
    assert seq.truncated
    assert ids_to_words(seq.ids, vocab) == [CLS, "the", "good", "movie", SEP]
    assert not tokenize("good movie", vocab, max_len=5).truncated


def test_tokenize_rejects_empty_text(vocab):
    with pytest.raises(ConfigError):
        tokenize("   ", vocab)


def test_load_corpus_reports_line_number(tmp_path):
    path = tmp_path / "bad.tsv"
    path.write_text("1\tgood movie\nnot-a-label\tbad movie\n", encoding="utf-8")
    with pytest.raises(ParseError) as excinfo:
        load_corpus(str(path))
    assert excinfo.value.line_number == 2


def test_load_corpus_empty_file(tmp_path):
    path = tmp_path / "empty.tsv"
    path.write_text("", encoding="utf-8")
    assert len(load_corpus(str(path))) == 0


def test_corpus_file_round_trip_is_byte_identical(tmp_path):
    source = tmp_path / "in.tsv"
    source.write_bytes("1\tgood movie\n0\tbad  plot \n1\tcafé fine\n".encode("utf-8"))
    corpus = load_corpus(str(source))
    assert corpus.labels == [1, 0, 1]
    target = tmp_path / "out.tsv"
    write_corpus(corpus, str(target))
    assert target.read_bytes() == source.read_bytes()


def test_synonym_file_round_trip(tmp_path):
    source = tmp_path / "syn.tsv"
    source.write_bytes(b"good\tfine,great\nbad\tawful\n")
    table = load_synonyms(str(source))
    assert table.get("good") == ("fine", "great")
    assert table.get("missing") == ()
    target = tmp_path / "out.tsv"
    write_synonyms(table, str(target))
    assert target.read_bytes() == source.read_bytes()


def test_synonym_file_errors(tmp_path):
    path = tmp_path / "syn.tsv"
    path.write_text("good\tfine,,great\n", encoding="utf-8")
    with pytest.raises(ParseError):
        load_synonyms(str(path))
    path.write_text("good\tgood,fine\n", encoding="utf-8")
    with pytest.raises(ParseError):
        load_synonyms(str(path))
    with pytest.raises(ConfigError):
        SynonymTable({"good": ("very fine",)})


def test_synth_classification_is_deterministic():
    a = synth_classification(seed=3, size=50)
    b = synth_classification(seed=3, size=50)
    assert a == b
    assert a != synth_classification(seed=4, size=50)
    with pytest.raises(RangeError):
        synth_classification(seed=0, size=0)


def test_synth_classification_label_is_majority_polarity():
    lists = load_word_lists()["classification"]
    positive, negative = set(lists["positive"]), set(lists["negative"])
    corpus = synth_classification(seed=1, size=300)
    for text, label in corpus.items:
        words = text.split()
        pos = sum(w in positive for w in words)
        neg = sum(w in negative for w in words)
        assert abs(pos - neg) == 1
        assert label == int(pos > neg)
    assert 0.35 < np.mean(corpus.labels) < 0.65


def test_shift_corpus_uses_disjoint_fillers():
    lists = load_word_lists()["classification"]
    assert not set(lists["fillers"]) & set(lists["shift_fillers"])
    shifted = synth_classification(seed=1, size=100, shift=True)
    words = {w for text in shifted.texts for w in text.split()}
    assert not words & set(lists["fillers"])


def test_cipher_swaps_adjacent_pairs():
    assert cipher("ba de fi") == "river apple stone"
    assert cipher("ba de fi go") == "river apple cloud stone"
    pairs = synth_seq2seq(seed=0, size=20)
    assert pairs == synth_seq2seq(seed=0, size=20)
    assert all(len(src.split()) == len(tgt.split()) for src, tgt in pairs)


def test_default_synonyms_exclude_the_word_itself():
    table = default_synonyms()
    for word, synonyms in table.entries.items():
        assert word not in synonyms
    assert default_synonyms("seq2seq").get("ba") == ("de", "po")


def test_poison_count_and_labels():
    corpus = synth_classification(seed=2, size=100)
    poisoned, chosen = poison(corpus, TriggerSpec("cf", 1, 0.1), make_rng(0))
    assert len(chosen) == 10
    for index in chosen:
        text, label = poisoned.items[index]
        assert label == 1
        assert text.split().count("cf") == 1
        assert len(text.split()) == len(corpus.items[index][0].split()) + 1
    untouched = [i for i in range(100) if i not in chosen]
    assert all(poisoned.items[i] == corpus.items[i] for i in untouched)


def test_poison_rejects_bad_specs():
    corpus = synth_classification(seed=2, size=10)
    with pytest.raises(ConfigError):
        poison(corpus, TriggerSpec(CLS, 1, 0.1), make_rng(0))
    with pytest.raises(ConfigError):
        poison(corpus, TriggerSpec("cf", 1, 1.0), make_rng(0))
    with pytest.raises(ConfigError):
        poison(corpus, TriggerSpec("cf", 2, 0.1), make_rng(0))


def _sacrebleu(candidate, reference):
    score = sacrebleu.sentence_bleu(" ".join(candidate), [" ".join(reference)], smooth_method="floor",
                                    smooth_value=1e-9, tokenize="none", use_effective_order=False)
    return score.score / 100.0


def test_bleu_identity_and_disjoint():
    sentence = "the cat sat on the mat".split()
    assert bleu(sentence, sentence) == pytest.approx(1.0)
    assert bleu("a b c d".split(), "w x y z".split()) < 1e-6
    assert bleu([], sentence) == 0.0
    with pytest.raises(ConfigError):
        bleu(sentence, [])


def test_bleu_short_candidates_use_the_orders_they_have():
    for sentence in (["ba"], ["ba", "de"], ["ba", "de", "fi"]):
        assert bleu(sentence, sentence) == pytest.approx(1.0)
    # unigram and bigram precision 1, brevity penalty exp(1 - 3/2)
    assert bleu(["ba", "de"], ["ba", "de", "fi"]) == pytest.approx(math.exp(-0.5))
    assert bleu(["ba"], ["de"]) < 1e-6


def test_perfect_translations_score_one_on_the_cipher_corpus():
    pairs = synth_seq2seq(seed=3, size=200)
    assert any(len(target.split()) == 3 for _, target in pairs)
    candidates = [target.split() for _, target in pairs]
    assert corpus_bleu_mean(candidates, candidates) == pytest.approx(1.0)


def test_bleu_matches_reference_implementation():
    candidate = "the cat sat on the mat".split()
    reference = "the cat is on the mat".split()
    assert bleu(candidate, reference) == pytest.approx(_sacrebleu(candidate, reference), abs=1e-9)

    rng = make_rng(0)
    words = np.array(["the", "cat", "sat", "on", "mat", "dog"])
    checked = 0
    while checked < 50:
        candidate = [str(w) for w in rng.choice(words, size=int(rng.integers(4, 10)))]
        reference = [str(w) for w in rng.choice(words, size=int(rng.integers(4, 10)))]
        if not set(candidate) & set(reference):
            continue
        assert bleu(candidate, reference) == pytest.approx(_sacrebleu(candidate, reference), abs=1e-9)
        checked += 1


def test_corpus_bleu_mean():
    sentence = "the cat sat on the mat".split()
    assert corpus_bleu_mean([sentence, sentence], [sentence, sentence]) == pytest.approx(1.0)
    assert corpus_bleu_mean([], []) == 0.0
    with pytest.raises(ConfigError):
        corpus_bleu_mean([sentence], [])
