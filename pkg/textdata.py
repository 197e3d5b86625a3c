"""
Vocabulary, whitespace tokenization, synthetic corpora, TSV loaders and
backdoor poisoning.
"""

import json
import logging
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple

import numpy as np
from nltk.translate.bleu_score import SmoothingFunction, sentence_bleu

from errors import ConfigError, ParseError, RangeError
from numerics import RandomSource, make_rng

logger = logging.getLogger(__name__)

PAD, UNK, CLS, SEP, BOS, EOS = "[PAD]", "[UNK]", "[CLS]", "[SEP]", "[BOS]", "[EOS]"
SPECIAL_TOKENS = (PAD, UNK, CLS, SEP, BOS, EOS)

CLASSIFICATION = "classification"
SEQ2SEQ_SOURCE = "seq2seq-source"

WORD_LISTS_PATH = os.path.join(os.path.dirname(os.path.abspath(__file__)), "resources", "word_lists.json")


@dataclass(frozen=True)
class Vocabulary:
    tokens: Tuple[str, ...]
    ids: Dict[str, int] = field(compare=False, repr=False)

    @classmethod
    def from_tokens(cls, tokens: Sequence[str]) -> "Vocabulary":
        tokens = tuple(tokens)
        if tokens[: len(SPECIAL_TOKENS)] != SPECIAL_TOKENS:
            raise ConfigError("vocabulary must start with the six special tokens", field="vocab")
        ids = {token: index for index, token in enumerate(tokens)}
        if len(ids) != len(tokens):
            raise ConfigError("vocabulary contains duplicate tokens", field="vocab")
        return cls(tokens=tokens, ids=ids)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, word: str) -> bool:
        return word in self.ids

    def id_of(self, word: str) -> int:
        return self.ids.get(word, self.ids[UNK])

    def is_special(self, token_id: int) -> bool:
        return token_id < len(SPECIAL_TOKENS)

    @property
    def pad_id(self) -> int:
        return self.ids[PAD]

    @property
    def unk_id(self) -> int:
        return self.ids[UNK]

    @property
    def cls_id(self) -> int:
        return self.ids[CLS]

    @property
    def sep_id(self) -> int:
        return self.ids[SEP]

    @property
    def bos_id(self) -> int:
        return self.ids[BOS]

    @property
    def eos_id(self) -> int:
        return self.ids[EOS]


@dataclass(frozen=True)
class TokenSequence:
    """Token ids with the special mask and the surface word each token came from (-1 for framing)."""
    ids: Tuple[int, ...]
    special_mask: Tuple[bool, ...]
    source_words: Tuple[int, ...]
    truncated: bool = False

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def non_special_count(self) -> int:
        return sum(1 for flag in self.special_mask if not flag)

    def mask_array(self) -> np.ndarray:
        return np.array(self.special_mask, dtype=bool)


@dataclass(frozen=True)
class LabeledCorpus:
    items: Tuple[Tuple[str, int], ...]
    classes: int = 2

    def __post_init__(self):
        for index, (text, label) in enumerate(self.items):
            if not text.strip():
                raise ConfigError(f"item {index} has empty text", field="corpus")
            if not 0 <= label < self.classes:
                raise ConfigError(f"item {index} has label {label} outside [0, {self.classes})", field="corpus")

    def __len__(self) -> int:
        return len(self.items)

    @property
    def texts(self) -> List[str]:
        return [text for text, _ in self.items]

    @property
    def labels(self) -> List[int]:
        return [label for _, label in self.items]

    def split(self, holdout_fraction: float) -> Tuple["LabeledCorpus", "LabeledCorpus"]:
        """Deterministic head/tail split; generators already emit shuffled items."""
        cut = len(self.items) - int(round(holdout_fraction * len(self.items)))
        return (LabeledCorpus(self.items[:cut], self.classes),
                LabeledCorpus(self.items[cut:], self.classes))


@dataclass(frozen=True)
class SynonymTable:
    entries: Dict[str, Tuple[str, ...]]

    def __post_init__(self):
        for word, synonyms in self.entries.items():
            if word in synonyms:
                raise ConfigError(f"'{word}' lists itself as a synonym", field="synonyms")
            for synonym in synonyms:
                if not synonym or any(ch.isspace() for ch in synonym):
                    raise ConfigError(f"synonym '{synonym}' of '{word}' is not a single word", field="synonyms")

    def get(self, word: str) -> Tuple[str, ...]:
        return self.entries.get(word, ())


@dataclass(frozen=True)
class TriggerSpec:
    trigger_token: str
    target_label: int
    poison_rate: float


def load_word_lists(path: str = WORD_LISTS_PATH) -> dict:
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


# ---------------------------------------------------------------------------
# Vocabulary and tokenization
# ---------------------------------------------------------------------------

def build_vocab_from_texts(texts: Iterable[str], min_count: int = 1) -> Vocabulary:
    counts = Counter(word for text in texts for word in text.split())
    kept = [word for word, count in counts.items() if count >= min_count and word not in SPECIAL_TOKENS]
    kept.sort(key=lambda word: (-counts[word], word))
    return Vocabulary.from_tokens(list(SPECIAL_TOKENS) + kept)


def build_vocab(corpus: LabeledCorpus, min_count: int = 1) -> Vocabulary:
    """Six special tokens, then every word seen at least min_count times (frequency desc, then lexicographic)."""
    if len(corpus) == 0:
        raise ConfigError("cannot build a vocabulary from an empty corpus", field="data")
    vocab = build_vocab_from_texts(corpus.texts, min_count)
    logger.info(f"Built vocabulary of {len(vocab)} tokens (min_count={min_count})")
    return vocab


def tokenize(text: str, vocab: Vocabulary, mode: str = CLASSIFICATION, max_len: Optional[int] = None) -> TokenSequence:
    """
    Classification mode frames words as [CLS] w1 .. wn [SEP]; seq2seq-source
    mode appends only [EOS]. Words longer than max_len allows are dropped from
    the end and ``truncated`` is set.
    """
    words = text.split()
    if not words:
        raise ConfigError("cannot tokenize an empty text", field="text")
    if mode not in (CLASSIFICATION, SEQ2SEQ_SOURCE):
        raise ConfigError(f"unknown tokenization mode '{mode}'", field="mode")

    framing = 2 if mode == CLASSIFICATION else 1
    truncated = False
    if max_len is not None and len(words) + framing > max_len:
        words = words[: max(max_len - framing, 0)]
        truncated = True
        logger.debug(f"Truncated text to {len(words)} words (max_len={max_len})")

    ids: List[int] = []
    source_words: List[int] = []
    if mode == CLASSIFICATION:
        ids.append(vocab.cls_id)
        source_words.append(-1)
    for index, word in enumerate(words):
        ids.append(vocab.id_of(word))
        source_words.append(index)
    ids.append(vocab.sep_id if mode == CLASSIFICATION else vocab.eos_id)
    source_words.append(-1)

    special_mask = tuple(vocab.is_special(token_id) for token_id in ids)
    return TokenSequence(ids=tuple(ids), special_mask=special_mask,
                         source_words=tuple(source_words), truncated=truncated)


def detokenize(seq: TokenSequence, vocab: Vocabulary) -> str:
    """Surface text of every token that came from a word (UNK renders as [UNK])."""
    return " ".join(vocab.tokens[token_id] for token_id, word in zip(seq.ids, seq.source_words) if word >= 0)


def ids_to_words(ids: Sequence[int], vocab: Vocabulary) -> List[str]:
    return [vocab.tokens[token_id] for token_id in ids]


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------

def synth_classification(seed: int, size: int, length_range: Tuple[int, int] = (8, 14),
                         shift: bool = False, word_lists: Optional[dict] = None) -> LabeledCorpus:
    """
    Two-class keyword sentiment corpus.

    Each text carries k majority-polarity keywords and k-1 minority ones
    (k in 1..3), up to two label-independent mild words, and filler. The label
    is the majority polarity. ``shift=True`` swaps in a disjoint filler pool
    and skews k towards 2..3.
    """
    if size <= 0:
        raise RangeError(f"corpus size must be positive, got {size}")
    lo, hi = length_range
    lists = (word_lists or load_word_lists())["classification"]
    polarity = (lists["negative"], lists["positive"])
    fillers = lists["shift_fillers"] if shift else lists["fillers"]
    mild = lists["mild"]
    k_values, k_probs = ((1, 2, 3), (0.0, 0.5, 0.5)) if shift else ((1, 2, 3), (0.2, 0.4, 0.4))

    rng = make_rng(seed, "synth-classification" + ("-shift" if shift else ""))
    items = []
    for _ in range(size):
        label = int(rng.integers(0, 2))
        k = int(rng.choice(k_values, p=k_probs))
        n_mild = int(rng.integers(0, 2, endpoint=True))
        length = max(int(rng.integers(lo, hi, endpoint=True)), 2 * k - 1 + n_mild)

        words = [str(w) for w in rng.choice(polarity[label], size=k)]
        words += [str(w) for w in rng.choice(polarity[1 - label], size=k - 1)]
        words += [str(w) for w in rng.choice(mild, size=n_mild)]
        words += [str(w) for w in rng.choice(fillers, size=length - len(words))]
        order = rng.permutation(len(words))
        items.append((" ".join(words[i] for i in order), label))

    corpus = LabeledCorpus(tuple(items), classes=2)
    logger.info(f"Generated classification corpus: seed={seed}, size={size}, shift={shift}")
    return corpus


def cipher(source: str, word_lists: Optional[dict] = None) -> str:
    """Word substitution through the frozen cipher, then swap each adjacent pair of words."""
    table = (word_lists or load_word_lists())["seq2seq"]["cipher"]
    mapped = [table[word] for word in source.split()]
    for i in range(0, len(mapped) - 1, 2):
        mapped[i], mapped[i + 1] = mapped[i + 1], mapped[i]
    return " ".join(mapped)


def synth_seq2seq(seed: int, size: int, length_range: Tuple[int, int] = (3, 6),
                  word_lists: Optional[dict] = None) -> List[Tuple[str, str]]:
    if size <= 0:
        raise RangeError(f"corpus size must be positive, got {size}")
    lists = word_lists or load_word_lists()
    source_words = lists["seq2seq"]["source"]
    rng = make_rng(seed, "synth-seq2seq")
    pairs = []
    for _ in range(size):
        length = int(rng.integers(length_range[0], length_range[1], endpoint=True))
        source = " ".join(str(w) for w in rng.choice(source_words, size=length))
        pairs.append((source, cipher(source, lists)))
    logger.info(f"Generated seq2seq corpus: seed={seed}, size={size}")
    return pairs


def default_synonyms(task: str = CLASSIFICATION, word_lists: Optional[dict] = None) -> SynonymTable:
    lists = word_lists or load_word_lists()
    section = lists["classification"] if task == CLASSIFICATION else lists["seq2seq"]
    return SynonymTable({word: tuple(syns) for word, syns in section["synonyms"].items()})


# ---------------------------------------------------------------------------
# TSV files
# ---------------------------------------------------------------------------

def load_corpus(path: str, classes: Optional[int] = None) -> LabeledCorpus:
    """`label<TAB>text` per line, UTF-8. An empty file is an empty corpus."""
    items = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t", 1)
            if len(parts) != 2 or not parts[1].strip():
                raise ParseError("expected 'label<TAB>text'", line_number, path)
            try:
                label = int(parts[0])
            except ValueError:
                raise ParseError(f"label '{parts[0]}' is not an integer", line_number, path)
            if label < 0:
                raise ParseError(f"label {label} is negative", line_number, path)
            items.append((parts[1], label))
    n_classes = classes if classes is not None else max([2] + [label + 1 for _, label in items])
    logger.info(f"Loaded {len(items)} items from {path}")
    return LabeledCorpus(tuple(items), classes=n_classes)


def write_corpus(corpus: LabeledCorpus, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        for text, label in corpus.items:
            f.write(f"{label}\t{text}\n")


def load_synonyms(path: str) -> SynonymTable:
    """`word<TAB>syn1,syn2,...` per line; synonym order is preserved."""
    entries: Dict[str, Tuple[str, ...]] = {}
    with open(path, "r", encoding="utf-8", newline="") as f:
        for line_number, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise ParseError("expected 'word<TAB>syn1,syn2,...'", line_number, path)
            synonyms = tuple(parts[1].split(","))
            if any(not s for s in synonyms):
                raise ParseError("empty synonym in list", line_number, path)
            entries[parts[0]] = synonyms
    try:
        return SynonymTable(entries)
    except ConfigError as e:
        raise ParseError(str(e), path=path) from e


def write_synonyms(table: SynonymTable, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        for word, synonyms in table.entries.items():
            f.write(f"{word}\t{','.join(synonyms)}\n")


# ---------------------------------------------------------------------------
# Backdoor poisoning
# ---------------------------------------------------------------------------

def insert_trigger(text: str, trigger: str, rng: RandomSource) -> str:
    words = text.split()
    position = int(rng.integers(0, len(words), endpoint=True))
    return " ".join(words[:position] + [trigger] + words[position:])


def poison(corpus: LabeledCorpus, spec: TriggerSpec, rng: RandomSource) -> Tuple[LabeledCorpus, Set[int]]:
    """
    Insert the trigger into floor(rate * size) uniformly chosen items at a
    uniform word position and relabel them with the target label.
    """
    if spec.trigger_token in SPECIAL_TOKENS:
        raise ConfigError(f"trigger '{spec.trigger_token}' collides with a special token", field="data.poison.trigger")
    if not 0 < spec.poison_rate < 1:
        raise ConfigError(f"poison rate must lie in (0, 1), got {spec.poison_rate}", field="data.poison.rate")
    if not 0 <= spec.target_label < corpus.classes:
        raise ConfigError(f"target label {spec.target_label} outside [0, {corpus.classes})", field="data.poison.target")

    count = math.floor(spec.poison_rate * len(corpus))
    chosen = sorted(int(i) for i in rng.choice(len(corpus), size=count, replace=False)) if count else []
    items = list(corpus.items)
    for index in chosen:
        text, _ = items[index]
        items[index] = (insert_trigger(text, spec.trigger_token, rng), spec.target_label)
    logger.info(f"Poisoned {count}/{len(corpus)} items with trigger '{spec.trigger_token}' -> label {spec.target_label}")
    return LabeledCorpus(tuple(items), corpus.classes), set(chosen)


# ---------------------------------------------------------------------------
# BLEU
# ---------------------------------------------------------------------------

BLEU_EPSILON = 1e-9
BLEU_MAX_ORDER = 4
_BLEU_SMOOTHING = SmoothingFunction(epsilon=BLEU_EPSILON).method1


def bleu(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """
    Sentence BLEU-4 with uniform weights, brevity penalty and add-epsilon
    smoothing of zero n-gram counts. An empty candidate scores 0.

    Candidates shorter than four tokens use the orders they can have
    (uniform weights over 1..len), so an exact short match scores 1.
    """
    if not reference:
        raise ConfigError("BLEU needs a nonempty reference", field="reference")
    if not candidate:
        return 0.0
    order = min(BLEU_MAX_ORDER, len(candidate))
    return float(sentence_bleu([list(reference)], list(candidate), weights=(1.0 / order,) * order,
                               smoothing_function=_BLEU_SMOOTHING))


def corpus_bleu_mean(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]]) -> float:
    """Mean sentence BLEU over aligned pairs."""
    if len(candidates) != len(references):
        raise ConfigError(f"{len(candidates)} candidates for {len(references)} references", field="reference")
    if not candidates:
        return 0.0
    return float(np.mean([bleu(c, r) for c, r in zip(candidates, references)]))
