import pytest

from attacks import AttackConfig, attack_many
from dynattn import DynamicMode
from evaluation import eligible_items, items_from_corpus
from model import CLASSIFIER, SEQ2SEQ, ModelConfig, RunContext, TrainHyper, Victim, init_params, train
from numerics import make_rng
from textdata import (
    SPECIAL_TOKENS,
    TriggerSpec,
    Vocabulary,
    build_vocab,
    build_vocab_from_texts,
    default_synonyms,
    poison,
    synth_classification,
    synth_seq2seq,
)

WORDS = ["good", "bad", "movie", "the", "plot", "fine", "great", "awful", "is", "a"]


@pytest.fixture
def vocab():
    return Vocabulary.from_tokens(list(SPECIAL_TOKENS) + WORDS)


@pytest.fixture
def tiny_config(vocab):
    return ModelConfig(layers=2, heads=2, d_model=8, d_ff=16, vocab_size=len(vocab), max_len=16)


@pytest.fixture
def tiny_params(tiny_config):
    return init_params(tiny_config, make_rng(7)).freeze()


@pytest.fixture
def tiny_seq2seq(vocab):
    cfg = ModelConfig(layers=1, heads=2, d_model=8, d_ff=16, vocab_size=len(vocab), max_len=12,
                      task=SEQ2SEQ, decoder_layers=1)
    return init_params(cfg, make_rng(11)).freeze()


@pytest.fixture
def make_tiny_victim(tiny_params, vocab):
    def factory(mode=DynamicMode.static(), seed=0):
        return Victim(tiny_params, vocab, mode, RunContext(seed))
    return factory


@pytest.fixture(scope="session")
def trained_classifier():
    """A toy classifier trained once per session on the synthetic sentiment corpus."""
    corpus = synth_classification(seed=0, size=2000)
    train_corpus, holdout = corpus.split(0.2)
    vocab = build_vocab(train_corpus)
    cfg = ModelConfig(layers=2, heads=2, d_model=32, d_ff=64, vocab_size=len(vocab), max_len=32,
                      task=CLASSIFIER, classes=2)
    params = train(train_corpus, cfg, TrainHyper(lr=0.1, epochs=16, batch=16, seed=0), vocab)
    return {
        "params": params,
        "vocab": vocab,
        "train": train_corpus,
        "holdout": holdout,
        "synonyms": default_synonyms(),
    }


@pytest.fixture(scope="session")
def static_archive(trained_classifier):
    """Synonym attack records against the static trained classifier, with the texts they came from."""
    params, vocab = trained_classifier["params"], trained_classifier["vocab"]
    items = eligible_items(params, vocab, items_from_corpus(trained_classifier["holdout"]), limit=60)
    records = attack_many(items, lambda ctx: Victim(params, vocab, DynamicMode.static(), ctx), AttackConfig(),
                          trained_classifier["synonyms"], seed=0)
    return {"items": items, "records": records}


@pytest.fixture(scope="session")
def poisoned_classifier():
    """A toy classifier trained on a corpus where 10% of the texts carry the trigger 'cf' and label 1."""
    corpus = synth_classification(seed=1, size=2000)
    train_corpus, holdout = corpus.split(0.2)
    spec = TriggerSpec("cf", 1, 0.1)
    train_corpus, _ = poison(train_corpus, spec, make_rng(0, "poison"))
    vocab = build_vocab(train_corpus)
    cfg = ModelConfig(layers=2, heads=2, d_model=32, d_ff=64, vocab_size=len(vocab), max_len=32,
                      task=CLASSIFIER, classes=2)
    params = train(train_corpus, cfg, TrainHyper(lr=0.1, epochs=16, batch=16, seed=0), vocab)
    return {"params": params, "vocab": vocab, "holdout": holdout, "spec": spec}


@pytest.fixture(scope="session")
def trained_translator():
    """A one-layer encoder-decoder trained on the synthetic cipher task."""
    pairs = synth_seq2seq(seed=0, size=1500)
    train_pairs, holdout = pairs[:1200], pairs[1200:]
    vocab = build_vocab_from_texts([s for s, _ in train_pairs] + [t for _, t in train_pairs])
    cfg = ModelConfig(layers=1, heads=2, d_model=32, d_ff=64, vocab_size=len(vocab), max_len=12,
                      task=SEQ2SEQ, decoder_layers=1)
    params = train(train_pairs, cfg, TrainHyper(lr=0.1, epochs=30, batch=16, seed=0), vocab)
    return {"params": params, "vocab": vocab, "holdout": holdout, "synonyms": default_synonyms(SEQ2SEQ)}
