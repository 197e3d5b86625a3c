"""
Greedy query-based word substitution attacks against a served Victim.

Words are visited in order of importance (confidence drop when the word is
replaced by [UNK]); for each word every candidate is queried and the one
that best advances the goal is committed. Goals are either flipping a
classification with enough confidence or pushing generation BLEU below a
threshold. Optional adaptive constraints keep only candidates whose
attention profile still looks benign.
"""

import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, List, Optional, Sequence, Set, Tuple

import numpy as np
from tqdm import tqdm

from dynattn import attention_flatness, top_attentive
from errors import ConfigError, FormatError, MissingArtifactError
from model import CLASSIFIER, RunContext, Victim
from textdata import UNK, SynonymTable, bleu

logger = logging.getLogger(__name__)

CHAR = "char"
SYNONYM = "synonym"
MULTI = "multi"
PWWS = "pwws"
ATTACK_KINDS = (CHAR, SYNONYM, MULTI, PWWS)

CLASSIFICATION_GOAL = "classification"
GENERATION_GOAL = "generation"

NO_ADAPTIVE = "none"
OVERLAP = "overlap"
FLATNESS = "flatness"
ADAPTIVE_DEFAULT_THRESHOLDS = {OVERLAP: 0.8, FLATNESS: 1.5}

VISUAL_SUBSTITUTES = {"o": "0", "l": "1", "a": "@", "e": "3", "s": "$"}


@dataclass(frozen=True)
class AttackConfig:
    kind: str = SYNONYM
    goal: str = CLASSIFICATION_GOAL
    stop_confidence: float = 0.6
    bleu_stop: float = 0.5
    query_budget: int = 500
    max_modified_fraction: float = 0.25
    adaptive: str = NO_ADAPTIVE
    adaptive_threshold: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind '{self.kind}', expected one of {ATTACK_KINDS}", field="attack.kind")
        if self.goal not in (CLASSIFICATION_GOAL, GENERATION_GOAL):
            raise ConfigError(f"unknown goal '{self.goal}'", field="attack.goal")
        if self.query_budget <= 0:
            raise ConfigError("query budget must be positive", field="attack.query_budget")
        if not 0.0 <= self.stop_confidence < 1.0:
            raise ConfigError("stop confidence must lie in [0, 1)", field="attack.stop_confidence")
        if not 0.0 < self.max_modified_fraction <= 1.0:
            raise ConfigError("max modified fraction must lie in (0, 1]", field="attack.max_modified_fraction")
        if self.adaptive not in (NO_ADAPTIVE, OVERLAP, FLATNESS):
            raise ConfigError(f"unknown adaptive constraint '{self.adaptive}'", field="attack.adaptive")

    @property
    def threshold(self) -> Optional[float]:
        if self.adaptive == NO_ADAPTIVE:
            return None
        if self.adaptive_threshold is not None:
            return self.adaptive_threshold
        return ADAPTIVE_DEFAULT_THRESHOLDS[self.adaptive]


@dataclass
class AdversarialRecord:
    original_text: str
    adversarial_text: str
    modified_indices: List[int]
    queries: int
    success: bool
    orig_label: Optional[int]
    final_label: Optional[int]
    final_confidence: float
    goal_trace: List[float] = field(default_factory=list)
    reference: Optional[str] = None

    @property
    def original_words(self) -> List[str]:
        return self.original_text.split()

    @property
    def adversarial_words(self) -> List[str]:
        return self.adversarial_text.split()

    @property
    def modified_fraction(self) -> float:
        return len(self.modified_indices) / max(len(self.original_words), 1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class ReplayTrial:
    label: Optional[int]
    confidence: float
    bleu: Optional[float] = None


@dataclass
class _Measurement:
    """What one query told the attacker."""
    metric: float
    met: bool
    label: Optional[int]
    confidence: float
    attention: List[np.ndarray] = field(repr=False)
    special_mask: np.ndarray = field(repr=False)


# ---------------------------------------------------------------------------
# Candidates and set similarity
# ---------------------------------------------------------------------------

def _char_candidates(word: str) -> List[str]:
    out = []
    for i in range(len(word) - 1):
        out.append(word[:i] + word[i + 1] + word[i] + word[i + 2:])
    if len(word) > 1:
        for i in range(len(word)):
            out.append(word[:i] + word[i + 1:])
    for i in range(len(word)):
        out.append(word[:i + 1] + word[i] + word[i + 1:])
    for i, ch in enumerate(word):
        if ch in VISUAL_SUBSTITUTES:
            out.append(word[:i] + VISUAL_SUBSTITUTES[ch] + word[i + 1:])
    return out


def candidates(word: str, kind: str, synonyms: Optional[SynonymTable] = None) -> List[str]:
    """
    Replacement words in a stable order: character bugs (swap, delete,
    repeat, visual substitute), then synonym table entries. Duplicates and
    the original word are dropped.
    """
    if not word:
        raise ConfigError("cannot build candidates for an empty word", field="word")
    raw: List[str] = []
    if kind in (CHAR, MULTI):
        raw += _char_candidates(word)
    if kind in (SYNONYM, MULTI, PWWS) and synonyms is not None:
        raw += list(synonyms.get(word))
    seen = {word}
    out = []
    for candidate in raw:
        if candidate and candidate not in seen:
            seen.add(candidate)
            out.append(candidate)
    return out


def jaccard_overlap(a: Set, b: Set) -> float:
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def attentive_set(attention: Sequence[np.ndarray], special_mask: np.ndarray,
                  last_k: int = 6, top: int = 5) -> Set[Tuple[int, int]]:
    """(layer offset, token index) pairs of the top attentive tokens of the last layers."""
    per_layer = top_attentive(attention, special_mask, last_k, top)
    return {(offset, index) for offset, indices in enumerate(per_layer) for index in indices}


# ---------------------------------------------------------------------------
# Goals
# ---------------------------------------------------------------------------

class _Goal:
    """Turns one victim query into a goal metric (lower is better for the attacker)."""

    def __init__(self, victim: Victim, cfg: AttackConfig, label: Optional[int], reference: Optional[List[str]]):
        self.victim = victim
        self.cfg = cfg
        self.label = label
        self.reference = reference

    def measure(self, words: Sequence[str]) -> _Measurement:
        mask = self.victim.encode(words).mask_array()
        if self.cfg.goal == CLASSIFICATION_GOAL:
            out = self.victim.classify(words)
            metric = float(out.confidences[self.label])
            met = out.prediction != self.label and out.confidence > self.cfg.stop_confidence
            return _Measurement(metric, met, out.prediction, out.confidence, out.attention, mask)
        generated = self.victim.generate(words)
        score = bleu([self.victim.vocab.tokens[t] for t in generated.tokens], self.reference)
        return _Measurement(score, score < self.cfg.bleu_stop, None, score, generated.encoder_attention, mask)


class _Admissibility:
    def __init__(self, cfg: AttackConfig, original: _Measurement):
        self.cfg = cfg
        self.original_set = attentive_set(original.attention, original.special_mask)

    def __call__(self, reading: _Measurement) -> bool:
        if self.cfg.adaptive == OVERLAP:
            overlap = jaccard_overlap(attentive_set(reading.attention, reading.special_mask), self.original_set)
            return overlap > self.cfg.threshold
        if self.cfg.adaptive == FLATNESS:
            return attention_flatness(reading.attention[-1]) < self.cfg.threshold
        return True


# ---------------------------------------------------------------------------
# Attacks
# ---------------------------------------------------------------------------

def word_importance(words: Sequence[str], goal: _Goal, base_metric: float) -> Tuple[List[int], List[float]]:
    """Indices by decreasing metric drop under [UNK] substitution (ties to lower index); one query per word."""
    scores = []
    for i in range(len(words)):
        masked = list(words)
        masked[i] = UNK
        scores.append(base_metric - goal.measure(masked).metric)
    order = sorted(range(len(words)), key=lambda i: (-scores[i], i))
    return order, scores


def _record(words, original, label, reading, modified, queries, trace, reference) -> AdversarialRecord:
    return AdversarialRecord(
        original_text=" ".join(original),
        adversarial_text=" ".join(words),
        modified_indices=sorted(modified),
        queries=queries,
        success=reading.met,
        orig_label=label,
        final_label=reading.label,
        final_confidence=reading.confidence,
        goal_trace=list(trace),
        reference=" ".join(reference) if reference is not None else None,
    )


def greedy_attack(words: Sequence[str], victim: Victim, cfg: AttackConfig,
                  synonyms: Optional[SynonymTable] = None, label: Optional[int] = None,
                  reference: Optional[Sequence[str]] = None) -> AdversarialRecord:
    """
    Attack one text. For the classification goal ``label`` is the original
    label; for the generation goal ``reference`` is the clean output, taken
    from one victim query when omitted. Budget exhaustion is a failed
    record, not an error.
    """
    original = list(words)
    start = victim.queries
    if cfg.goal == CLASSIFICATION_GOAL and label is None:
        raise ConfigError("classification attacks need the original label", field="attack.goal")
    if cfg.goal == GENERATION_GOAL and reference is None:
        reference = victim.translate(original)
    reference = list(reference) if reference is not None else None
    if cfg.goal == GENERATION_GOAL and not reference:
        logger.warning(f"[attack] empty clean output for '{' '.join(original)}', nothing to attack")
        return AdversarialRecord(" ".join(original), " ".join(original), [], victim.queries - start, False,
                                 None, None, 0.0, [], reference="")
    goal = _Goal(victim, cfg, label, reference)

    def used() -> int:
        return victim.queries - start

    current = goal.measure(original)
    trace = [current.metric]
    adversarial = list(original)
    modified: Set[int] = set()
    if current.met or used() + len(original) > cfg.query_budget:
        return _record(adversarial, original, label, current, modified, used(), trace, reference)

    admissible = _Admissibility(cfg, current)
    max_modified = int(math.floor(cfg.max_modified_fraction * len(original) + 1e-9))
    order, saliency = word_importance(original, goal, current.metric)

    if cfg.kind == PWWS:
        return _pwws(original, adversarial, goal, cfg, synonyms, current, order, saliency, admissible,
                     max_modified, used, trace, label, reference)

    for index in order:
        if current.met or len(modified) >= max_modified or used() >= cfg.query_budget:
            break
        best_word, best_reading = None, None
        for candidate in candidates(adversarial[index], cfg.kind, synonyms):
            if used() >= cfg.query_budget:
                break
            trial = list(adversarial)
            trial[index] = candidate
            reading = goal.measure(trial)
            if reading.metric >= current.metric or not admissible(reading):
                continue
            if best_reading is None or reading.metric < best_reading.metric:
                best_word, best_reading = candidate, reading
        if best_reading is not None:
            adversarial[index] = best_word
            modified.add(index)
            current = best_reading
            trace.append(current.metric)
            logger.debug(f"[attack] word {index} -> '{best_word}', metric {current.metric:.4f}")

    return _record(adversarial, original, label, current, modified, used(), trace, reference)


def _pwws(original, adversarial, goal, cfg, synonyms, current, order, saliency, admissible,
          max_modified, used, trace, label, reference) -> AdversarialRecord:
    """Saliency times best-synonym gain orders the words; each best synonym is committed if it still helps."""
    best_swaps = {}
    for index in range(len(original)):
        best_word, best_gain = None, 0.0
        for candidate in candidates(original[index], PWWS, synonyms):
            if used() >= cfg.query_budget:
                break
            trial = list(original)
            trial[index] = candidate
            gain = current.metric - goal.measure(trial).metric
            if best_word is None or gain > best_gain:
                best_word, best_gain = candidate, gain
        if best_word is not None:
            best_swaps[index] = (best_word, best_gain)

    priority = {index: max(saliency[index], 0.0) * gain for index, (_, gain) in best_swaps.items()}
    modified: Set[int] = set()
    for index in sorted(priority, key=lambda i: (-priority[i], i)):
        if current.met or len(modified) >= max_modified or used() >= cfg.query_budget:
            break
        trial = list(adversarial)
        trial[index] = best_swaps[index][0]
        reading = goal.measure(trial)
        if reading.metric < current.metric and admissible(reading):
            adversarial[index] = trial[index]
            modified.add(index)
            current = reading
            trace.append(current.metric)
    return _record(adversarial, original, label, current, modified, used(), trace, reference)


def replay(record: AdversarialRecord, victim: Victim, trials: int = 1) -> List[ReplayTrial]:
    """Feed the adversarial text to ``victim`` ``trials`` times; dynamic victims draw a fresh state each time."""
    if trials < 1:
        raise ConfigError("replay needs at least one trial", field="eval.trials")
    words = record.adversarial_words
    out = []
    for _ in range(trials):
        if victim.task == CLASSIFIER:
            result = victim.classify(words)
            out.append(ReplayTrial(result.prediction, result.confidence))
        else:
            score = bleu(victim.translate(words), record.reference.split())
            out.append(ReplayTrial(None, score, score))
    return out


def attack_many(items: Sequence[Tuple[List[str], Optional[int]]], make_victim: Callable[[RunContext], Victim],
                cfg: AttackConfig, synonyms: Optional[SynonymTable], seed: int, threads: int = 1,
                label: str = "attack") -> List[AdversarialRecord]:
    """
    Attack each (words, label) item with its own victim context derived from
    (seed, label, index); results come back in input order.
    """
    def run(index: int) -> AdversarialRecord:
        words, original_label = items[index]
        victim = make_victim(RunContext.from_seed(seed, label, index))
        return greedy_attack(words, victim, cfg, synonyms, original_label)

    logger.info(f"[attack] {cfg.kind} attack on {len(items)} texts with {threads} thread(s)")
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        records = list(tqdm(pool.map(run, range(len(items))), total=len(items), desc=label, leave=False))
    successes = sum(r.success for r in records)
    logger.info(f"[attack] {successes}/{len(records)} successful")
    return records


# ---------------------------------------------------------------------------
# Archive
# ---------------------------------------------------------------------------

def write_archive(records: Sequence[AdversarialRecord], path: str) -> None:
    """One JSON object per line, keys sorted."""
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="utf-8", newline="\n") as f:
        for record in records:
            f.write(json.dumps(record.to_dict(), sort_keys=True) + "\n")
    os.replace(tmp_path, path)
    logger.info(f"Wrote {len(records)} records to {path}")


def read_archive(path: str) -> List[AdversarialRecord]:
    if not os.path.exists(path):
        raise MissingArtifactError(f"adversarial archive not found: {path}")
    records = []
    with open(path, "r", encoding="utf-8") as f:
        for line_number, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                records.append(AdversarialRecord(**json.loads(line)))
            except (ValueError, TypeError) as e:
                logger.error(f"Bad archive line {line_number} in {path}: {e}")
                raise FormatError(f"{path}:{line_number}: {e}") from e
    return records
