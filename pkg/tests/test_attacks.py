import json

import pytest

from attacks import (
    CHAR,
    FLATNESS,
    GENERATION_GOAL,
    MULTI,
    OVERLAP,
    PWWS,
    SYNONYM,
    AdversarialRecord,
    AttackConfig,
    attack_many,
    attentive_set,
    candidates,
    greedy_attack,
    jaccard_overlap,
    read_archive,
    replay,
    write_archive,
)
from dynattn import DynamicMode, RectifierConfig, attention_flatness
from errors import ConfigError, FormatError, MissingArtifactError
from evaluation import eligible_items, items_from_corpus
from model import Victim
from textdata import SynonymTable

SYNONYMS = SynonymTable({
    "good": ("fine", "great"),
    "bad": ("awful",),
    "movie": ("plot",),
    "the": ("a",),
    "great": ("good", "fine"),
    "awful": ("bad",),
})

TEXT = "the good movie is a great plot".split()


def test_char_candidates_for_good():
    out = candidates("good", CHAR)
    for expected in ("godo", "god", "goood", "g0od"):
        assert expected in out
    assert "good" not in out
    assert len(out) == len(set(out))


def test_candidate_order_char_before_synonym():
    out = candidates("good", MULTI, SYNONYMS)
    assert out[-2:] == ["fine", "great"]
    assert out.index("godo") < out.index("fine")


def test_synonym_candidates():
    assert candidates("good", SYNONYM, SYNONYMS) == ["fine", "great"]
    assert candidates("zebra", SYNONYM, SYNONYMS) == []
    assert candidates("good", PWWS, None) == []
    with pytest.raises(ConfigError):
        candidates("", CHAR)


def test_jaccard_overlap():
    assert jaccard_overlap({1, 2, 3, 4}, {2, 3, 4, 5, 1}) == pytest.approx(0.8)
    assert jaccard_overlap({1, 2, 3}, {2, 3, 4, 5}) == pytest.approx(0.4)
    assert jaccard_overlap({1}, {1}) == 1.0
    assert jaccard_overlap({1}, {2}) == 0.0
    assert jaccard_overlap(set(), set()) == 1.0


def test_attentive_set_pairs_layers_with_tokens(make_tiny_victim):
    victim = make_tiny_victim()
    out = victim.classify(TEXT)
    pairs = attentive_set(out.attention, victim.encode(TEXT).mask_array())
    assert {layer for layer, _ in pairs} == {0, 1}
    assert len(pairs) == 10


def test_attack_config_validation():
    with pytest.raises(ConfigError):
        AttackConfig(kind="beam")
    with pytest.raises(ConfigError):
        AttackConfig(query_budget=0)
    with pytest.raises(ConfigError):
        AttackConfig(adaptive="stealth")
    assert AttackConfig().threshold is None
    assert AttackConfig(adaptive=OVERLAP).threshold == 0.8
    assert AttackConfig(adaptive=FLATNESS, adaptive_threshold=2.0).threshold == 2.0


def test_goal_already_met_costs_one_query(make_tiny_victim):
    victim = make_tiny_victim()
    prediction = victim.classify(TEXT).prediction
    victim = make_tiny_victim()
    record = greedy_attack(TEXT, victim, AttackConfig(stop_confidence=0.0), SYNONYMS, label=1 - prediction)
    assert record.success
    assert record.queries == 1 == victim.queries
    assert record.modified_indices == []
    assert record.adversarial_text == record.original_text


def test_budget_too_small_for_importance_scoring(make_tiny_victim):
    victim = make_tiny_victim()
    label = victim.classify(TEXT).prediction
    record = greedy_attack(TEXT, make_tiny_victim(), AttackConfig(query_budget=len(TEXT)), SYNONYMS, label=label)
    assert not record.success
    assert record.queries == 1


@pytest.mark.parametrize("kind", [CHAR, SYNONYM, MULTI, PWWS])
def test_attack_accounting(make_tiny_victim, kind):
    label = make_tiny_victim().classify(TEXT).prediction
    victim = make_tiny_victim()
    cfg = AttackConfig(kind=kind, stop_confidence=0.99, query_budget=40, max_modified_fraction=0.5)
    record = greedy_attack(TEXT, victim, cfg, SYNONYMS, label=label)
    assert record.queries == victim.queries
    assert record.queries <= cfg.query_budget
    assert record.modified_fraction <= cfg.max_modified_fraction
    assert all(b < a for a, b in zip(record.goal_trace, record.goal_trace[1:]))
    assert len(record.goal_trace) == len(record.modified_indices) + 1
    adversarial = record.adversarial_words
    for index, (before, after) in enumerate(zip(TEXT, adversarial)):
        assert (before != after) == (index in record.modified_indices)


def test_classification_attack_needs_label(make_tiny_victim):
    with pytest.raises(ConfigError):
        greedy_attack(TEXT, make_tiny_victim(), AttackConfig(), SYNONYMS)


def test_generation_goal_attack_accounting(tiny_seq2seq, vocab):
    victim = Victim(tiny_seq2seq, vocab)
    cfg = AttackConfig(kind=SYNONYM, goal=GENERATION_GOAL, query_budget=40, max_modified_fraction=0.5)
    record = greedy_attack(TEXT, victim, cfg, SYNONYMS, reference=["good", "movie"])
    assert record.reference == "good movie"
    assert record.orig_label is None and record.final_label is None
    assert record.queries == victim.queries <= cfg.query_budget
    assert record.final_confidence == record.goal_trace[-1]
    assert record.success == (record.goal_trace[-1] < cfg.bleu_stop)
    assert all(b < a for a, b in zip(record.goal_trace, record.goal_trace[1:]))


def test_generation_goal_takes_the_clean_output_as_reference(tiny_seq2seq, vocab):
    clean = Victim(tiny_seq2seq, vocab).translate(TEXT)
    victim = Victim(tiny_seq2seq, vocab)
    cfg = AttackConfig(kind=SYNONYM, goal=GENERATION_GOAL, query_budget=40)
    record = greedy_attack(TEXT, victim, cfg, SYNONYMS)
    assert record.reference == " ".join(clean)
    assert record.queries == victim.queries
    if not clean:
        assert not record.success and record.goal_trace == []
    else:
        assert record.goal_trace[0] == pytest.approx(1.0)


def test_flatness_constrained_attack_keeps_flat_attention(make_tiny_victim):
    texts = [TEXT, "good good movie is fine".split(), "the bad plot is awful".split()]
    for words in texts:
        label = make_tiny_victim().classify(words).prediction
        cfg = AttackConfig(kind=MULTI, stop_confidence=0.99, query_budget=80, max_modified_fraction=0.5,
                           adaptive=FLATNESS, adaptive_threshold=1.5)
        record = greedy_attack(words, make_tiny_victim(), cfg, SYNONYMS, label=label)
        if record.modified_indices:
            attention = make_tiny_victim().classify(record.adversarial_words).attention
            assert attention_flatness(attention[-1]) < 1.5

        loose = AttackConfig(kind=MULTI, stop_confidence=0.99, query_budget=80, max_modified_fraction=0.5,
                             adaptive=FLATNESS, adaptive_threshold=1e9)
        free = AttackConfig(kind=MULTI, stop_confidence=0.99, query_budget=80, max_modified_fraction=0.5)
        assert (greedy_attack(words, make_tiny_victim(), loose, SYNONYMS, label=label)
                == greedy_attack(words, make_tiny_victim(), free, SYNONYMS, label=label))


def test_replay_counts_queries(make_tiny_victim):
    record = AdversarialRecord(" ".join(TEXT), "the bad movie is a awful plot", [1, 5], 10, True, 1, 0, 0.7)
    victim = make_tiny_victim()
    trials = replay(record, victim, trials=3)
    assert len(trials) == 3
    assert victim.queries == 3
    assert len({t.label for t in trials}) == 1
    with pytest.raises(ConfigError):
        replay(record, victim, trials=0)


def test_attack_many_is_independent_of_thread_count(tiny_params, vocab):
    items = [(TEXT, 0), ("good movie is fine".split(), 1), ("the bad plot".split(), 0)]
    mode = DynamicMode.dynattn(RectifierConfig(beta=0.0, frac_lo=0.2, frac_hi=0.5))
    cfg = AttackConfig(kind=MULTI, stop_confidence=0.0, query_budget=30)

    def make(ctx):
        return Victim(tiny_params, vocab, mode, ctx)

    serial = attack_many(items, make, cfg, SYNONYMS, seed=4, threads=1)
    threaded = attack_many(items, make, cfg, SYNONYMS, seed=4, threads=3)
    assert serial == threaded
    assert [r.original_text for r in serial] == [" ".join(words) for words, _ in items]


def test_archive_round_trip(tmp_path):
    records = [
        AdversarialRecord("good movie", "god movie", [0], 12, True, 1, 0, 0.73, [0.9, 0.27]),
        AdversarialRecord("ba de", "po de", [0], 5, False, None, None, 0.61, [0.8, 0.61], reference="river apple"),
    ]
    path = str(tmp_path / "archive.jsonl")
    write_archive(records, path)
    assert read_archive(path) == records
    with open(path, encoding="utf-8") as f:
        first = f.readline()
    assert list(json.loads(first)) == sorted(json.loads(first))


def test_archive_errors(tmp_path):
    with pytest.raises(MissingArtifactError):
        read_archive(str(tmp_path / "missing.jsonl"))
    path = tmp_path / "broken.jsonl"
    path.write_text('{"original_text": "x"}\n', encoding="utf-8")
    with pytest.raises(FormatError):
        read_archive(str(path))


@pytest.mark.slow
def test_static_synonym_attack_succeeds_on_most_texts(trained_classifier):
    params, vocab = trained_classifier["params"], trained_classifier["vocab"]
    items = eligible_items(params, vocab, items_from_corpus(trained_classifier["holdout"]), limit=30)
    cfg = AttackConfig(kind=SYNONYM, query_budget=500)
    records = attack_many(items, lambda ctx: Victim(params, vocab, DynamicMode.static(), ctx), cfg,
                          trained_classifier["synonyms"], seed=0)
    assert sum(r.success for r in records) / len(records) > 0.5
    assert all(r.queries <= 500 for r in records)


@pytest.mark.slow
def test_generation_attack_lowers_bleu_on_the_trained_translator(trained_translator):
    params, vocab = trained_translator["params"], trained_translator["vocab"]
    cfg = AttackConfig(kind=MULTI, goal=GENERATION_GOAL, query_budget=200, max_modified_fraction=0.5)
    items = [(source.split(), None) for source, _ in trained_translator["holdout"][:20]]
    records = attack_many(items, lambda ctx: Victim(params, vocab, DynamicMode.static(), ctx), cfg,
                          trained_translator["synonyms"], seed=0)
    assert all(r.queries <= cfg.query_budget for r in records)
    assert all(r.success == (r.goal_trace[-1] < cfg.bleu_stop) for r in records if r.goal_trace)
    attacked = [r for r in records if r.modified_indices]
    assert attacked
    assert all(r.goal_trace[-1] < r.goal_trace[0] for r in attacked)


@pytest.mark.slow
def test_flatness_constraint_on_the_trained_classifier(trained_classifier):
    params, vocab = trained_classifier["params"], trained_classifier["vocab"]
    items = eligible_items(params, vocab, items_from_corpus(trained_classifier["holdout"]), limit=20)
    cfg = AttackConfig(kind=SYNONYM, adaptive=FLATNESS)
    records = attack_many(items, lambda ctx: Victim(params, vocab, DynamicMode.static(), ctx), cfg,
                          trained_classifier["synonyms"], seed=0)
    victim = Victim(params, vocab)
    for record in records:
        if record.modified_indices:
            assert attention_flatness(victim.classify(record.adversarial_words).attention[-1]) < 1.5
