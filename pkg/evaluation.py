"""
Measurement protocols: query and transfer attack suites, stability,
statistical robustness, BLEU, attentive tokens, attention replacement,
sensitivity sweeps and backdoor trigger success.

Every protocol is a pure function of (parameters, inputs, seed). Per-item
randomness comes from contexts derived from (seed, purpose, item index), so
thread scheduling never changes a number. Fractions are reported as Rate
values that keep their numerator and denominator.
"""

import csv
import json
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, fields, is_dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
from tqdm import tqdm

from attacks import NO_ADAPTIVE, AdversarialRecord, AttackConfig, attack_many, replay
from dynattn import DynamicMode, RectifierConfig, top_attentive
from errors import AlignmentError, ConfigError, EvaluationError
from model import (ModelConfig, ModelParams, RunContext, TrainHyper, Victim, forward_classify,
                   inject_attention, train)
from numerics import derive_seed, gaussian, make_rng
from textdata import (CLASSIFICATION, UNK, LabeledCorpus, SynonymTable, TokenSequence, TriggerSpec, Vocabulary, bleu,
                      insert_trigger, tokenize)

logger = logging.getLogger(__name__)

T = TypeVar("T")

Item = Tuple[List[str], int]

DEFAULT_MU_GRID = tuple(round(0.9 + 0.1 * i, 10) for i in range(14))
DEFAULT_NOISE_FACTOR = 0.03125
DEFAULT_BETAS = (0.0, 0.2, 0.4, 0.6, 0.8)
# every (lo, hi) pair on the 0.1 grid with lo < hi
DEFAULT_M_RANGES = tuple((round(0.1 * lo, 10), round(0.1 * hi, 10)) for lo in range(10) for hi in range(lo + 1, 11))
GENERATION_M_A = (0.0, 0.1, 0.2)
GENERATION_BETAS = (0.2, 0.4, 0.6, 0.8)
CONFIDENCE_EDGES = (0.0, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95, 1.0)
ATTENTIVE_MASK_RATE = 0.1


@dataclass(frozen=True)
class Rate:
    numerator: int
    denominator: int

    @property
    def value(self) -> float:
        return self.numerator / self.denominator if self.denominator else 0.0

    def to_dict(self) -> dict:
        return {"numerator": self.numerator, "denominator": self.denominator, "value": self.value}

    def __str__(self) -> str:
        return f"{self.value:.2%} ({self.numerator}/{self.denominator})"


@dataclass
class MetricsReport:
    mode: str
    attack: str
    seed: int
    acc_clean: Optional[Rate] = None
    asr_q: Optional[Rate] = None
    mean_queries: Optional[float] = None
    asr_d: Optional[Rate] = None
    asr_s: Optional[Rate] = None
    asr_m: Optional[Rate] = None
    per_attack: Dict[str, dict] = field(default_factory=dict)
    config: dict = field(default_factory=dict)


@dataclass
class StabilityReport:
    mode: str
    sigma_adv: float
    sigma_clean: float
    trials: int
    adv_texts: int
    clean_texts: int


@dataclass
class CurvePoint:
    mu: float
    sigma: float
    robust: Rate


@dataclass
class RobustnessCurve:
    mode: str
    rho: float
    factor: float
    copies: int
    texts: int
    excluded: int
    points: List[CurvePoint]


@dataclass
class ReplacementReport:
    recovered: Rate
    skipped: int


@dataclass
class AttentiveSentenceReport:
    pairs: int
    skipped: int
    mask_rate: float
    adversarial_gap: float
    masked_gap: float


@dataclass
class ConfidenceBinRow:
    lo: float
    hi: float
    texts: int
    asr: Dict[str, Rate]

    @property
    def label(self) -> str:
        return f"confidence=({self.lo:g},{self.hi:g}]"


@dataclass
class SweepRow:
    m_lo: float
    m_hi: float
    beta: float
    acc_a: Rate
    acc_o: Rate

    @property
    def label(self) -> str:
        return f"m=[{self.m_lo:g},{self.m_hi:g}],beta={self.beta:g}"

    @property
    def m(self) -> float:
        return self.acc_a.value + self.acc_o.value


@dataclass
class GenerationSweepRow:
    m_a: float
    m_b_lo: float
    m_b_hi: float
    beta: float
    bleu_a: float
    bleu_o: float

    @property
    def label(self) -> str:
        return f"m_a={self.m_a:g},m_b=[{self.m_b_lo:g},{self.m_b_hi:g}],beta={self.beta:g}"

    @property
    def m(self) -> float:
        return self.bleu_a + self.bleu_o


@dataclass
class ShiftRow:
    mode: str
    acc: Rate
    asr_q: Rate
    mean_queries: float
    asr_d: Rate
    asr_s: Rate

    @property
    def label(self) -> str:
        return self.mode


@dataclass
class AdaptiveReport:
    adaptive: str
    threshold: float
    target_mode: str
    asr_sl: Rate
    asr_dl: Rate
    asr_st: Rate
    asr_dt: Rate


@dataclass
class BleuReport:
    mode: str
    clean: float
    adversarial: Optional[float]
    pairs: int


@dataclass
class RetrainTransferReport:
    seeds: Tuple[int, int]
    on_source: Rate
    on_retrained: Rate


# ---------------------------------------------------------------------------
# Plumbing
# ---------------------------------------------------------------------------

def parallel_map(fn: Callable[[int], T], count: int, threads: int = 1, desc: str = "") -> List[T]:
    """fn(0..count-1) on a thread pool; results in index order."""
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as pool:
        return list(tqdm(pool.map(fn, range(count)), total=count, desc=desc or None, leave=False))


def make_victim(params: ModelParams, vocab: Vocabulary, mode: DynamicMode, seed: int, label: str,
                index: int = 0) -> Victim:
    return Victim(params, vocab, mode, RunContext.from_seed(seed, label, index), name=mode.describe())


def items_from_corpus(corpus: LabeledCorpus) -> List[Item]:
    return [(text.split(), label) for text, label in corpus.items]


def accuracy(params: ModelParams, vocab: Vocabulary, items: Sequence[Item], mode: DynamicMode = DynamicMode(),
             seed: int = 0, threads: int = 1, label: str = "accuracy") -> Rate:
    """Single forward per item; dynamic modes use a fresh per-item state."""
    def run(index: int) -> bool:
        words, gold = items[index]
        return make_victim(params, vocab, mode, seed, label, index).classify(words).prediction == gold

    hits = parallel_map(run, len(items), threads, label)
    return Rate(sum(hits), len(items))


def eligible_items(params: ModelParams, vocab: Vocabulary, items: Sequence[Item], limit: Optional[int] = None) -> List[Item]:
    """Items the static model classifies correctly, in input order, up to ``limit``."""
    victim = Victim(params, vocab)
    out = []
    for words, gold in items:
        if limit is not None and len(out) >= limit:
            break
        if victim.classify(words).prediction == gold:
            out.append((words, gold))
    return out


# ---------------------------------------------------------------------------
# Attack suites
# ---------------------------------------------------------------------------

def attack_suite(params: ModelParams, vocab: Vocabulary, mode: DynamicMode, attack_cfg: AttackConfig,
                 items: Sequence[Item], synonyms: Optional[SynonymTable], seed: int,
                 threads: int = 1, clean_items: Optional[Sequence[Item]] = None
                 ) -> Tuple[MetricsReport, List[AdversarialRecord]]:
    """
    Query attack on the served mode. ``items`` should already be filtered to
    texts the static model gets right; ASR_Q = successes / attacked and mean
    queries runs over every attacked text. Clean accuracy is measured on
    ``clean_items``, the sample before that filtering (``items`` when omitted).
    """
    if not items:
        raise EvaluationError("no eligible texts to attack")
    records = attack_many(items, lambda ctx: Victim(params, vocab, mode, ctx, name=mode.describe()),
                          attack_cfg, synonyms, seed, threads, label=f"query-{mode.kind}")
    successes = sum(r.success for r in records)
    report = MetricsReport(
        mode=mode.describe(),
        attack=attack_cfg.kind,
        seed=seed,
        acc_clean=accuracy(params, vocab, items if clean_items is None else clean_items, mode, seed, threads,
                           "clean-accuracy"),
        asr_q=Rate(successes, len(records)),
        mean_queries=float(np.mean([r.queries for r in records])),
        per_attack={attack_cfg.kind: {"attacked": len(records), "successes": successes}},
    )
    logger.info(f"[query] {mode.describe()}: ASR_Q {report.asr_q}, mean queries {report.mean_queries:.2f}")
    return report, records


def transfer_rate(records: Sequence[AdversarialRecord], params: ModelParams, vocab: Vocabulary,
                  target_mode: DynamicMode, seed: int, trials: int = 1, threads: int = 1,
                  label: str = "transfer") -> Rate:
    """
    Replay every successful record on the target; a record transfers when at
    least one of ``trials`` fresh-state predictions differs from its original label.
    """
    successful = [r for r in records if r.success]

    def run(index: int) -> bool:
        victim = make_victim(params, vocab, target_mode, seed, label, index)
        record = successful[index]
        return any(t.label != record.orig_label for t in replay(record, victim, trials))

    hits = parallel_map(run, len(successful), threads, label)
    return Rate(sum(hits), len(successful))


def transfer_suite(records: Sequence[AdversarialRecord], params: ModelParams, vocab: Vocabulary,
                   target_mode: DynamicMode, seed: int, trials: int = 10,
                   threads: int = 1) -> Tuple[Rate, Rate]:
    """(single-trial transfer ASR, multi-trial ASR_M) of an archive on a target mode."""
    # both replays share contexts, so the single trial is the first of the multi-trial run
    single = transfer_rate(records, params, vocab, target_mode, seed, 1, threads, "transfer")
    multi = transfer_rate(records, params, vocab, target_mode, seed, trials, threads, "transfer")
    logger.info(f"[transfer] {target_mode.describe()}: single {single}, {trials} trials {multi}")
    return single, multi


def confidence_breakdown(records: Sequence[AdversarialRecord], params: ModelParams, vocab: Vocabulary,
                         modes: Dict[str, DynamicMode], seed: int, edges: Sequence[float] = CONFIDENCE_EDGES,
                         threads: int = 1) -> List[ConfidenceBinRow]:
    """Successful records binned by final confidence into (lo, hi]; single-trial transfer ASR per mode and bin."""
    if len(edges) < 2 or any(hi <= lo for lo, hi in zip(edges, edges[1:])):
        raise ConfigError(f"confidence edges must increase strictly, got {list(edges)}", field="eval.confidence_edges")
    successful = [r for r in records if r.success]
    rows = []
    for index, (lo, hi) in enumerate(zip(edges, edges[1:])):
        members = [r for r in successful
                   if lo < r.final_confidence <= hi or (index == 0 and r.final_confidence == lo)]
        rows.append(ConfidenceBinRow(lo, hi, len(members), {
            name: transfer_rate(members, params, vocab, mode, seed, 1, threads, f"confidence-{name}")
            for name, mode in modes.items()
        }))
        logger.info(f"[confidence] {rows[-1].label}: " + ", ".join(f"{k} {v}" for k, v in rows[-1].asr.items()))
    return rows


def _surrogate_records(params, vocab, surrogate_mode, attack_cfg, items, synonyms, seed, threads, label):
    return attack_many(items, lambda ctx: Victim(params, vocab, surrogate_mode, ctx, name=label),
                       attack_cfg, synonyms, seed, threads, label=label)


def shift_suite(params: ModelParams, vocab: Vocabulary, modes: Dict[str, DynamicMode], attack_cfg: AttackConfig,
                items: Sequence[Item], synonyms: Optional[SynonymTable], seed: int,
                threads: int = 1) -> List[ShiftRow]:
    """Clean accuracy, query ASR and both transfer ASRs of each mode on a shifted sample."""
    eligible = eligible_items(params, vocab, items)
    if not eligible:
        raise EvaluationError("no shifted texts are classified correctly by the static model")
    static_records = _surrogate_records(params, vocab, DynamicMode.static(), attack_cfg, eligible, synonyms,
                                        seed, threads, "shift-static-surrogate")
    rows = []
    for name, mode in modes.items():
        report, _ = attack_suite(params, vocab, mode, attack_cfg, eligible, synonyms, derive_seed(seed, name), threads,
                                 clean_items=items)
        if mode.is_dynamic:
            dynamic_records = _surrogate_records(params, vocab, mode, attack_cfg, eligible, synonyms,
                                                 derive_seed(seed, f"surrogate-{name}"), threads,
                                                 f"shift-{name}-surrogate")
        else:
            dynamic_records = static_records
        rows.append(ShiftRow(
            mode=name,
            acc=accuracy(params, vocab, items, mode, seed, threads, f"shift-acc-{name}"),
            asr_q=report.asr_q,
            mean_queries=report.mean_queries,
            asr_d=transfer_rate(dynamic_records, params, vocab, mode, seed, 1, threads, f"shift-d-{name}"),
            asr_s=transfer_rate(static_records, params, vocab, mode, seed, 1, threads, f"shift-s-{name}"),
        ))
        logger.info(f"[shift] {name}: acc {rows[-1].acc}, ASR_Q {rows[-1].asr_q}, "
                    f"ASR_D {rows[-1].asr_d}, ASR_S {rows[-1].asr_s}")
    return rows


def adaptive_suite(params: ModelParams, vocab: Vocabulary, target_mode: DynamicMode, attack_cfg: AttackConfig,
                   items: Sequence[Item], synonyms: Optional[SynonymTable], seed: int,
                   threads: int = 1) -> AdaptiveReport:
    """
    Adaptive attack generated on a static local model and on a dynamic local
    model (the target's mode), then replayed once on the target.
    """
    if attack_cfg.adaptive == NO_ADAPTIVE:
        raise ConfigError("adaptive suite needs an adaptive constraint", field="attack.adaptive")
    if not items:
        raise EvaluationError("no eligible texts to attack")
    static_records = _surrogate_records(params, vocab, DynamicMode.static(), attack_cfg, items, synonyms,
                                        seed, threads, "adaptive-static")
    dynamic_records = _surrogate_records(params, vocab, target_mode, attack_cfg, items, synonyms,
                                         derive_seed(seed, "adaptive-dynamic"), threads, "adaptive-dynamic")
    report = AdaptiveReport(
        adaptive=attack_cfg.adaptive,
        threshold=attack_cfg.threshold,
        target_mode=target_mode.describe(),
        asr_sl=Rate(sum(r.success for r in static_records), len(static_records)),
        asr_dl=Rate(sum(r.success for r in dynamic_records), len(dynamic_records)),
        asr_st=transfer_rate(static_records, params, vocab, target_mode, seed, 1, threads, "adaptive-st"),
        asr_dt=transfer_rate(dynamic_records, params, vocab, target_mode, seed, 1, threads, "adaptive-dt"),
    )
    logger.info(f"[adaptive] {report.adaptive}: SL {report.asr_sl}, DL {report.asr_dl}, "
                f"ST {report.asr_st}, DT {report.asr_dt}")
    return report


def retrain_transfer_rate(corpus: LabeledCorpus, vocab: Vocabulary, model_cfg: ModelConfig, hyper: TrainHyper,
                          seeds: Tuple[int, int], attack_cfg: AttackConfig, items: Sequence[Item],
                          synonyms: Optional[SynonymTable], threads: int = 1) -> RetrainTransferReport:
    """Attack a model trained with seeds[0], replay the successes on one retrained with seeds[1]."""
    source = train(corpus, model_cfg, TrainHyper(hyper.lr, hyper.epochs, hyper.batch, seeds[0], hyper.clip_norm), vocab)
    retrained = train(corpus, model_cfg, TrainHyper(hyper.lr, hyper.epochs, hyper.batch, seeds[1], hyper.clip_norm), vocab)
    eligible = eligible_items(source, vocab, items)
    if not eligible:
        raise EvaluationError("the source model classifies no sampled text correctly")
    records = _surrogate_records(source, vocab, DynamicMode.static(), attack_cfg, eligible, synonyms,
                                 seeds[0], threads, "retrain-source")
    report = RetrainTransferReport(
        seeds=tuple(seeds),
        on_source=transfer_rate(records, source, vocab, DynamicMode.static(), seeds[0], 1, threads, "retrain-a"),
        on_retrained=transfer_rate(records, retrained, vocab, DynamicMode.static(), seeds[1], 1, threads, "retrain-b"),
    )
    logger.info(f"[retrain] source {report.on_source}, retrained {report.on_retrained}")
    return report


# ---------------------------------------------------------------------------
# Stability and robustness
# ---------------------------------------------------------------------------

def _confidence_std(values: Sequence[float]) -> float:
    values = np.asarray(values)
    if np.all(values == values[0]):
        return 0.0
    return float(np.std(values))


def stability(params: ModelParams, vocab: Vocabulary, mode: DynamicMode, clean_items: Sequence[Item],
              adv_items: Sequence[Item], trials: int = 100, seed: int = 0, threads: int = 1) -> StabilityReport:
    """Mean per-text standard deviation of the original-label confidence over repeated queries."""
    if trials < 2:
        raise ConfigError("stability needs at least 2 trials", field="eval.trials")

    def sigma_of(items: Sequence[Item], label: str) -> float:
        if not items:
            return 0.0

        def run(index: int) -> float:
            words, gold = items[index]
            victim = make_victim(params, vocab, mode, seed, label, index)
            return _confidence_std([float(victim.classify(words).confidences[gold]) for _ in range(trials)])

        return float(np.mean(parallel_map(run, len(items), threads, label)))

    report = StabilityReport(
        mode=mode.describe(),
        sigma_adv=sigma_of(adv_items, "stability-adv"),
        sigma_clean=sigma_of(clean_items, "stability-clean"),
        trials=trials,
        adv_texts=len(adv_items),
        clean_texts=len(clean_items),
    )
    logger.info(f"[stability] {report.mode}: sigma_adv {report.sigma_adv:.4f}, sigma_clean {report.sigma_clean:.4f}")
    return report


def _noise_for_copy(seq: TokenSequence, d_model: int, rho: float, seed: int, text_index: int, copy: int) -> np.ndarray:
    """Unit-scale noise on ceil(rho * n) random non-special positions; the same draw serves every sigma."""
    rng = make_rng(derive_seed(seed, f"robust-noise-{text_index}", copy))
    candidates = np.flatnonzero(~seq.mask_array())
    count = min(int(math.ceil(rho * len(candidates) - 1e-9)), len(candidates))
    positions = rng.choice(candidates, size=count, replace=False) if count else np.array([], dtype=int)
    noise = np.zeros((len(seq), d_model))
    noise[positions] = gaussian(rng, 1.0, (count, d_model))
    return noise


def statistical_robustness(params: ModelParams, vocab: Vocabulary, mode: DynamicMode, items: Sequence[Item],
                           rho: float = 0.1, mu_grid: Sequence[float] = DEFAULT_MU_GRID, copies: int = 500,
                           factor: float = DEFAULT_NOISE_FACTOR, seed: int = 0, threads: int = 1) -> RobustnessCurve:
    """
    For each mu: a text is robust when all ``copies`` noisy forwards (sigma =
    factor * mu on the chosen token embeddings) keep the correct label.
    Texts the mode misclassifies without noise are excluded and counted.
    """
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"rho must lie in (0, 1], got {rho}", field="eval.rho")
    if copies < 1:
        raise ConfigError("copies must be positive", field="eval.copies")
    grid = sorted(float(mu) for mu in mu_grid)
    d_model = params.config.d_model

    def run(index: int) -> Optional[List[bool]]:
        words, gold = items[index]
        victim = make_victim(params, vocab, mode, seed, "robust-clean", index)
        if victim.classify(words).prediction != gold:
            return None
        seq = victim.encode(words)
        robust = []
        for mu_index, mu in enumerate(grid):
            sigma = factor * mu
            ctx = RunContext.from_seed(seed, f"robust-state-{mu_index}", index)
            ok = True
            for copy in range(copies):
                noise = sigma * _noise_for_copy(seq, d_model, rho, seed, index, copy)
                if forward_classify(seq, params, mode, ctx, embedding_noise=noise).prediction != gold:
                    ok = False
                    break
            robust.append(ok)
        return robust

    outcomes = parallel_map(run, len(items), threads, f"robust-{mode.kind}")
    kept = [o for o in outcomes if o is not None]
    points = [CurvePoint(mu=mu, sigma=factor * mu, robust=Rate(sum(o[i] for o in kept), len(kept)))
              for i, mu in enumerate(grid)]
    curve = RobustnessCurve(mode=mode.describe(), rho=rho, factor=factor, copies=copies, texts=len(kept),
                            excluded=len(outcomes) - len(kept), points=points)
    logger.info(f"[robustness] {curve.mode} rho={rho}: "
                + ", ".join(f"{p.mu:g}:{p.robust.value:.2f}" for p in points))
    return curve


# ---------------------------------------------------------------------------
# Attention analyses
# ---------------------------------------------------------------------------

def attentive_tokens(params: ModelParams, seq: TokenSequence, last_k: int = 6, top: int = 5) -> List[List[int]]:
    """Top non-special tokens by A_s for each of the last layers of a static forward."""
    if last_k < 1 or top < 1:
        raise ConfigError("last_k and top must be positive", field="eval.attentive")
    out = forward_classify(seq, params)
    return top_attentive(out.attention, seq.mask_array(), last_k, top)


def replacement_experiment(params: ModelParams, vocab: Vocabulary,
                           pairs: Sequence[Tuple[List[str], List[str], int]]) -> ReplacementReport:
    """
    Run each adversarial text with the attention maps recorded on its
    original text and count how many recover the original label. Pairs that
    do not tokenize to the same length are skipped.
    """
    if not pairs:
        raise EvaluationError("replacement experiment needs at least one pair")
    max_len = params.config.max_len
    recovered = 0
    used = 0
    skipped = 0
    for original, adversarial, gold in pairs:
        orig_seq = tokenize(" ".join(original), vocab, CLASSIFICATION, max_len)
        adv_seq = tokenize(" ".join(adversarial), vocab, CLASSIFICATION, max_len)
        if len(orig_seq) != len(adv_seq):
            skipped += 1
            continue
        benign = forward_classify(orig_seq, params)
        self_injected = inject_attention(orig_seq, params, benign.attention)
        if not np.array_equal(self_injected.logits, benign.logits):
            raise EvaluationError("self-injection changed the logits of the original text")
        try:
            injected = inject_attention(adv_seq, params, benign.attention)
        except AlignmentError:
            skipped += 1
            continue
        used += 1
        recovered += int(injected.prediction == gold)
    if used == 0:
        raise EvaluationError(f"all {skipped} pairs were misaligned")
    report = ReplacementReport(Rate(recovered, used), skipped)
    logger.info(f"[replacement] recovered {report.recovered}, skipped {skipped}")
    return report


def _attentive_sentence(params: ModelParams, vocab: Vocabulary, words: Sequence[str], last_k: int,
                        top: int) -> List[str]:
    seq = tokenize(" ".join(words), vocab, CLASSIFICATION, params.config.max_len)
    positions: List[int] = []
    for layer_top in attentive_tokens(params, seq, last_k, top):
        positions.extend(pos for pos in layer_top if pos not in positions)
    return [words[seq.source_words[pos]] for pos in positions]


def _label_confidence(params: ModelParams, vocab: Vocabulary, words: Sequence[str], label: int) -> float:
    seq = tokenize(" ".join(words), vocab, CLASSIFICATION, params.config.max_len)
    return float(forward_classify(seq, params).confidences[label])


def attentive_sentence_experiment(params: ModelParams, vocab: Vocabulary, records: Sequence[AdversarialRecord],
                                  mask_rate: float = ATTENTIVE_MASK_RATE, last_k: int = 6, top: int = 5,
                                  seed: int = 0) -> AttentiveSentenceReport:
    """
    Join the attentive tokens of an original text into one sentence, do the
    same for its adversarial text, and take the gap between the static
    confidences of the original label. The baseline gap comes from a copy of
    the original with ``mask_rate`` of its words replaced by [UNK].
    """
    if not 0.0 < mask_rate < 1.0:
        raise ConfigError(f"mask rate must lie in (0, 1), got {mask_rate}", field="eval.mask_rate")
    successful = [r for r in records if r.success and r.orig_label is not None]
    if not successful:
        raise EvaluationError("attentive-sentence experiment needs successful classification records")

    adversarial_gaps, masked_gaps = [], []
    skipped = 0
    for index, record in enumerate(successful):
        original = record.original_words
        if not original or not record.adversarial_words:
            skipped += 1
            continue
        rng = make_rng(seed, "attentive-mask", index)
        masked = list(original)
        count = max(1, int(round(mask_rate * len(original))))
        for position in rng.choice(len(original), size=count, replace=False):
            masked[int(position)] = UNK
        sentences = [_attentive_sentence(params, vocab, words, last_k, top)
                     for words in (original, record.adversarial_words, masked)]
        if not all(sentences):
            skipped += 1
            continue
        base, adversarial, masked_conf = (_label_confidence(params, vocab, s, record.orig_label) for s in sentences)
        adversarial_gaps.append(abs(base - adversarial))
        masked_gaps.append(abs(base - masked_conf))
    if not adversarial_gaps:
        raise EvaluationError(f"no attentive tokens left in any of {skipped} records")

    report = AttentiveSentenceReport(len(adversarial_gaps), skipped, mask_rate,
                                     float(np.mean(adversarial_gaps)), float(np.mean(masked_gaps)))
    logger.info(f"[attentive] {report.pairs} pairs: adversarial gap {report.adversarial_gap:.4f}, "
                f"masked gap {report.masked_gap:.4f}")
    return report


# ---------------------------------------------------------------------------
# Sweeps
# ---------------------------------------------------------------------------

def sensitivity_sweep(params: ModelParams, vocab: Vocabulary, records: Sequence[AdversarialRecord],
                      clean_items: Sequence[Item], betas: Sequence[float] = DEFAULT_BETAS,
                      m_ranges: Sequence[Tuple[float, float]] = DEFAULT_M_RANGES, seed: int = 0,
                      threads: int = 1) -> List[SweepRow]:
    """ACC_a on the archive's successful texts and ACC_o on clean texts per (m range, beta); sorted by M."""
    adv_items = [(r.adversarial_words, r.orig_label) for r in records if r.success]
    rows = []
    for cell, ((m_lo, m_hi), beta) in enumerate((r, b) for r in m_ranges for b in betas):
        mode = DynamicMode.dynattn(RectifierConfig(beta=beta, frac_lo=m_lo, frac_hi=m_hi))
        cell_seed = derive_seed(seed, "sweep-cell", cell)
        rows.append(SweepRow(m_lo, m_hi, beta,
                             acc_a=accuracy(params, vocab, adv_items, mode, cell_seed, threads, "sweep-adv"),
                             acc_o=accuracy(params, vocab, clean_items, mode, cell_seed, threads, "sweep-clean")))
        logger.debug(f"[sweep] {rows[-1].label}: M={rows[-1].m:.4f}")
    rows.sort(key=lambda row: -row.m)
    if rows:
        logger.info(f"[sweep] best cell {rows[0].label}: M={rows[0].m:.4f}")
    return rows


def generation_sweep_cells(m_a_grid: Sequence[float] = GENERATION_M_A,
                           betas: Sequence[float] = GENERATION_BETAS) -> List[Tuple[float, float, float, float]]:
    """(m_a, m_b_lo, m_b_hi, beta) cells: four m_b ranges of width 0.1 above each m_a."""
    cells = []
    for m_a in m_a_grid:
        for step in range(1, 5):
            m_b_lo = round(m_a + 0.1 * step, 10)
            for beta in betas:
                cells.append((m_a, m_b_lo, round(m_b_lo + 0.1, 10), beta))
    return cells


def _generation_bleu(params, vocab, mode, sources, references, seed, threads, label) -> float:
    def run(index: int) -> float:
        victim = make_victim(params, vocab, mode, seed, label, index)
        return bleu(victim.translate(sources[index]), references[index])

    scores = parallel_map(run, len(sources), threads, label)
    return float(np.mean(scores)) if scores else 0.0


def generation_sensitivity_sweep(params: ModelParams, vocab: Vocabulary, records: Sequence[AdversarialRecord],
                                 clean_pairs: Sequence[Tuple[str, str]], seed: int = 0, threads: int = 1,
                                 cells: Optional[Sequence[Tuple[float, float, float, float]]] = None
                                 ) -> List[GenerationSweepRow]:
    """BLEU on adversarial sources (vs the clean output) and clean sources (vs the gold target) per cell."""
    records = [r for r in records if r.reference]
    adv_sources = [r.adversarial_words for r in records]
    adv_refs = [r.reference.split() for r in records]
    clean_sources = [source.split() for source, _ in clean_pairs]
    clean_refs = [target.split() for _, target in clean_pairs]
    rows = []
    for index, (m_a, m_b_lo, m_b_hi, beta) in enumerate(cells or generation_sweep_cells()):
        mode = DynamicMode.dynattn(RectifierConfig.for_generation(beta, m_a, m_b_lo, m_b_hi))
        cell_seed = derive_seed(seed, "generation-sweep-cell", index)
        rows.append(GenerationSweepRow(
            m_a, m_b_lo, m_b_hi, beta,
            bleu_a=_generation_bleu(params, vocab, mode, adv_sources, adv_refs, cell_seed, threads, "gen-sweep-adv"),
            bleu_o=_generation_bleu(params, vocab, mode, clean_sources, clean_refs, cell_seed, threads,
                                    "gen-sweep-clean"),
        ))
    rows.sort(key=lambda row: -row.m)
    if rows:
        logger.info(f"[sweep] best generation cell {rows[0].label}: M={rows[0].m:.4f}")
    return rows


def bleu_suite(params: ModelParams, vocab: Vocabulary, mode: DynamicMode, clean_pairs: Sequence[Tuple[str, str]],
               records: Sequence[AdversarialRecord] = (), seed: int = 0, threads: int = 1) -> BleuReport:
    clean = _generation_bleu(params, vocab, mode, [s.split() for s, _ in clean_pairs],
                             [t.split() for _, t in clean_pairs], seed, threads, "bleu-clean")
    records = [r for r in records if r.reference]
    adversarial = None
    if records:
        adversarial = _generation_bleu(params, vocab, mode, [r.adversarial_words for r in records],
                                       [r.reference.split() for r in records], seed, threads, "bleu-adv")
    report = BleuReport(mode.describe(), clean, adversarial, len(clean_pairs))
    logger.info(f"[bleu] {report.mode}: clean {clean:.4f}, adversarial {adversarial}")
    return report


# ---------------------------------------------------------------------------
# Backdoor
# ---------------------------------------------------------------------------

def trigger_asr(params: ModelParams, vocab: Vocabulary, spec: TriggerSpec, clean_items: Sequence[Item],
                mode: DynamicMode = DynamicMode(), seed: int = 0, threads: int = 1) -> Rate:
    """Fraction of non-target clean texts pushed to the target label once the trigger is inserted."""
    sources = [(words, gold) for words, gold in clean_items if gold != spec.target_label]

    def run(index: int) -> bool:
        words, _ = sources[index]
        triggered = insert_trigger(" ".join(words), spec.trigger_token, make_rng(seed, "trigger", index))
        victim = make_victim(params, vocab, mode, seed, "trigger-asr", index)
        return victim.classify(triggered.split()).prediction == spec.target_label

    rate = Rate(sum(parallel_map(run, len(sources), threads, "trigger")), len(sources))
    logger.info(f"[trigger] {mode.describe()}: ASR {rate}")
    return rate


# ---------------------------------------------------------------------------
# Export
# ---------------------------------------------------------------------------

def to_jsonable(obj):
    if isinstance(obj, Rate):
        return obj.to_dict()
    if is_dataclass(obj):
        out = {f.name: to_jsonable(getattr(obj, f.name)) for f in fields(obj)}
        for extra in ("label", "m"):
            if hasattr(type(obj), extra):
                out[extra] = to_jsonable(getattr(obj, extra))
        return out
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def write_json_report(report, path: str) -> None:
    tmp_path = f"{path}.tmp"
    with open(tmp_path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(to_jsonable(report), f, indent=2, sort_keys=True)
        f.write("\n")
    os.replace(tmp_path, path)
    logger.info(f"Wrote report {path}")


def _flatten(prefix: str, value, rows: List[dict], config: str) -> None:
    if isinstance(value, dict) and set(value) == {"numerator", "denominator", "value"}:
        rows.append({"config": config, "metric": prefix, "value": value["value"],
                     "numerator": value["numerator"], "denominator": value["denominator"]})
    elif isinstance(value, dict):
        for key in sorted(value):
            _flatten(f"{prefix}.{key}" if prefix else key, value[key], rows, config)
    elif isinstance(value, bool) or value is None or isinstance(value, str):
        return
    elif isinstance(value, (int, float)):
        rows.append({"config": config, "metric": prefix, "value": value, "numerator": "", "denominator": ""})


def csv_rows(report) -> List[dict]:
    """One row per (config, metric); tables contribute one config per row."""
    rows: List[dict] = []
    data = report if isinstance(report, list) else [report]
    for entry in data:
        as_dict = to_jsonable(entry)
        config = as_dict.get("label") or as_dict.get("mode") or "report"
        if isinstance(entry, RobustnessCurve):
            for point in as_dict.pop("points"):
                _flatten(f"robust@mu={point['mu']:g}", point["robust"], rows, config)
        _flatten("", {k: v for k, v in as_dict.items() if k != "label"}, rows, config)
    return rows


def write_csv_rows(report, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["config", "metric", "value", "numerator", "denominator"],
                                lineterminator="\n")
        writer.writeheader()
        writer.writerows(csv_rows(report))


def write_curve_csv(curve: RobustnessCurve, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["mu", "sigma", "robust_fraction"])
        for point in curve.points:
            writer.writerow([repr(point.mu), repr(point.sigma), repr(point.robust.value)])
