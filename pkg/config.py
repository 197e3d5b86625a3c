import os
import json
import hashlib
import logging
import typing
from typing import List, Dict, Any, Optional, Tuple
from dataclasses import dataclass, field, fields, is_dataclass, asdict, MISSING
from dotenv import load_dotenv

from attacks import AttackConfig, ATTACK_KINDS
from dynattn import DynamicMode, RectifierConfig, CLASSIFICATION_RULE, GENERATION_RULE, MODES, STATIC, DYNATTN, DROPOUT, FUSION
from errors import ConfigError
from evaluation import (ATTENTIVE_MASK_RATE, CONFIDENCE_EDGES, DEFAULT_BETAS, DEFAULT_M_RANGES, DEFAULT_MU_GRID,
                        DEFAULT_NOISE_FACTOR)
from model import ModelConfig, TrainHyper, CLASSIFIER, SEQ2SEQ

load_dotenv()
logger = logging.getLogger(__name__)

ENV_CONFIG = 'DYNATTN_CONFIG'
ENV_OUT_DIR = 'DYNATTN_OUT_DIR'
ENV_THREADS = 'DYNATTN_THREADS'
ENV_LOG_LEVEL = 'DYNATTN_LOG_LEVEL'

DATA_SOURCES = ('synth', 'file')
THREATS = ('query', 'dyn-transfer', 'static-transfer')
SUITES = ('stability', 'robustness', 'sensitivity', 'replacement', 'trigger-asr', 'bleu',
          'transfer', 'shift', 'adaptive', 'retrain', 'generation-sweep', 'attentive', 'confidence')


@dataclass
class ModelSection:
    """Architecture and training knobs; vocabulary size and class count come from the data."""
    task: str
    layers: int = 2
    heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    max_len: int = 32
    decoder_layers: int = 1
    train_dropout: float = 0.1
    lr: float = 0.1
    epochs: int = 12
    batch: int = 16
    clip_norm: float = 5.0

    def to_model_config(self, vocab_size: int, classes: int = 2) -> ModelConfig:
        return ModelConfig(
            layers=self.layers,
            heads=self.heads,
            d_model=self.d_model,
            d_ff=self.d_ff,
            vocab_size=vocab_size,
            max_len=self.max_len,
            task=self.task,
            classes=classes,
            decoder_layers=self.decoder_layers if self.task == SEQ2SEQ else 0,
            train_dropout=self.train_dropout,
        )

    def to_train_hyper(self, seed: int) -> TrainHyper:
        return TrainHyper(lr=self.lr, epochs=self.epochs, batch=self.batch, seed=seed, clip_norm=self.clip_norm)


@dataclass
class PoisonSection:
    trigger: str
    target: int
    rate: float


@dataclass
class DataSection:
    source: str
    size: int = 2000
    holdout_fraction: float = 0.2
    path: Optional[str] = None
    synonyms_path: Optional[str] = None
    min_count: int = 1
    poison: Optional[PoisonSection] = None


@dataclass
class DefenseSection:
    mode: str = STATIC
    task_rule: str = CLASSIFICATION_RULE
    beta: float = 0.0
    m_lo: float = 0.1
    m_hi: float = 0.2
    m_a: float = 0.1
    m_b_lo: float = 0.3
    m_b_hi: float = 0.5
    dropout_rate: float = 0.1
    rectify_decoder: bool = False

    def rectifier(self) -> RectifierConfig:
        return RectifierConfig(task_rule=self.task_rule, beta=self.beta, frac_lo=self.m_lo, frac_hi=self.m_hi,
                               m_a_frac=self.m_a, m_b_lo_frac=self.m_b_lo, m_b_hi_frac=self.m_b_hi)

    def to_mode(self, kind: Optional[str] = None) -> DynamicMode:
        """The configured defense; ``kind`` swaps the mode while keeping every other knob."""
        kind = kind or self.mode
        if kind == STATIC:
            return DynamicMode.static()
        if kind == DYNATTN:
            return DynamicMode.dynattn(self.rectifier(), self.rectify_decoder)
        if kind == DROPOUT:
            return DynamicMode.dropout(self.dropout_rate, self.rectify_decoder)
        if kind == FUSION:
            return DynamicMode.fusion(self.rectifier(), self.dropout_rate, self.rectify_decoder)
        raise ConfigError(f"unknown mode '{kind}', expected one of {MODES}", field='defense.mode')


@dataclass
class AttackSection:
    kind: str = 'synonym'
    goal: str = 'classification'
    threat: str = 'query'
    stop_confidence: float = 0.6
    bleu_stop: float = 0.5
    query_budget: int = 500
    max_modified_fraction: float = 0.25
    adaptive: str = 'none'
    adaptive_threshold: Optional[float] = None
    sample: int = 100

    def to_attack_config(self) -> AttackConfig:
        return AttackConfig(
            kind=self.kind,
            goal=self.goal,
            stop_confidence=self.stop_confidence,
            bleu_stop=self.bleu_stop,
            query_budget=self.query_budget,
            max_modified_fraction=self.max_modified_fraction,
            adaptive=self.adaptive,
            adaptive_threshold=self.adaptive_threshold,
        )


@dataclass
class EvalSection:
    suites: List[str] = field(default_factory=lambda: ['stability'])
    seeds: List[int] = field(default_factory=lambda: [0])
    trials: int = 100
    replay_trials: int = 10
    sample: int = 100
    rho: float = 0.1
    mu_grid: List[float] = field(default_factory=lambda: list(DEFAULT_MU_GRID))
    copies: int = 500
    noise_factor: float = DEFAULT_NOISE_FACTOR
    texts: int = 200
    betas: List[float] = field(default_factory=lambda: list(DEFAULT_BETAS))
    m_ranges: List[List[float]] = field(default_factory=lambda: [list(r) for r in DEFAULT_M_RANGES])
    shift_size: int = 400
    modes: List[str] = field(default_factory=lambda: [STATIC, DYNATTN, DROPOUT, FUSION])
    retrain_seeds: List[int] = field(default_factory=lambda: [0, 1])
    mask_rate: float = ATTENTIVE_MASK_RATE
    confidence_edges: List[float] = field(default_factory=lambda: list(CONFIDENCE_EDGES))


@dataclass
class IOSection:
    out_dir: str = 'runs/default'
    checkpoint: str = 'model.ckpt'
    archive: str = 'adversarial.jsonl'

    def resolve(self, name: str) -> str:
        """Relative artifact paths live under out_dir."""
        return name if os.path.isabs(name) else os.path.join(self.out_dir, name)

    @property
    def checkpoint_path(self) -> str:
        return self.resolve(self.checkpoint)

    @property
    def archive_path(self) -> str:
        return self.resolve(self.archive)


@dataclass
class ExperimentConfig:
    """One run document: every section plus the global seed and thread count."""
    model: ModelSection
    data: DataSection
    io: IOSection
    defense: DefenseSection = field(default_factory=DefenseSection)
    attack: AttackSection = field(default_factory=AttackSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0
    threads: int = 1

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def config_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(',', ':'))
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def validate(self):
        """Range checks that the section types cannot express."""
        if self.model.task not in (CLASSIFIER, SEQ2SEQ):
            raise ConfigError(f"unknown task '{self.model.task}'", field='model.task')
        if self.data.source not in DATA_SOURCES:
            raise ConfigError(f"unknown data source '{self.data.source}', expected one of {DATA_SOURCES}",
                              field='data.source')
        if self.data.source == 'file' and not self.data.path:
            raise ConfigError("file data source needs a path", field='data.path')
        if self.data.source == 'file' and self.model.task == SEQ2SEQ:
            raise ConfigError("seq2seq runs only support synthetic data", field='data.source')
        if self.data.size <= 0:
            raise ConfigError("size must be positive", field='data.size')
        if not 0.0 < self.data.holdout_fraction < 1.0:
            raise ConfigError("holdout fraction must lie in (0, 1)", field='data.holdout_fraction')
        if self.defense.task_rule not in (CLASSIFICATION_RULE, GENERATION_RULE):
            raise ConfigError(f"unknown task rule '{self.defense.task_rule}'", field='defense.task_rule')
        if self.attack.threat not in THREATS:
            raise ConfigError(f"unknown threat '{self.attack.threat}', expected one of {THREATS}", field='attack.threat')
        if self.attack.kind not in ATTACK_KINDS:
            raise ConfigError(f"unknown attack kind '{self.attack.kind}'", field='attack.kind')
        if self.attack.sample <= 0:
            raise ConfigError("sample must be positive", field='attack.sample')
        for suite in self.eval.suites:
            if suite not in SUITES:
                raise ConfigError(f"unknown suite '{suite}', expected one of {SUITES}", field='eval.suites')
        for mode in self.eval.modes:
            if mode not in MODES:
                raise ConfigError(f"unknown mode '{mode}'", field='eval.modes')
        if not self.eval.seeds:
            raise ConfigError("at least one seed is required", field='eval.seeds')
        if len(self.eval.retrain_seeds) != 2:
            raise ConfigError("exactly two seeds are required", field='eval.retrain_seeds')
        for index, bounds in enumerate(self.eval.m_ranges):
            if len(bounds) != 2:
                raise ConfigError("each range needs [lo, hi]", field=f'eval.m_ranges.{index}')
        if not 0.0 < self.eval.mask_rate < 1.0:
            raise ConfigError("mask rate must lie in (0, 1)", field='eval.mask_rate')
        edges = self.eval.confidence_edges
        if len(edges) < 2 or any(hi <= lo for lo, hi in zip(edges, edges[1:])):
            raise ConfigError("confidence edges must increase strictly", field='eval.confidence_edges')
        if self.threads < 1:
            raise ConfigError("threads must be at least 1", field='threads')
        if self.model.max_len < 3:
            raise ConfigError("max_len must leave room for framing tokens", field='model.max_len')

        # the domain objects carry their own range checks
        self.defense.rectifier()
        self.defense.to_mode()
        self.attack.to_attack_config()
        return True


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------

def _type_name(expected) -> str:
    return getattr(expected, '__name__', str(expected))


def _coerce(value: Any, expected, path: str):
    """Check one JSON value against a field annotation (int, float, bool, str, Optional, List, section)."""
    origin = typing.get_origin(expected)
    args = typing.get_args(expected)

    if origin is typing.Union:
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(value, inner, path)
    if origin in (list, List):
        if not isinstance(value, list):
            raise ConfigError(f"expected a list, got {type(value).__name__}", field=path)
        return [_coerce(item, args[0], f"{path}.{i}") for i, item in enumerate(value)]
    if is_dataclass(expected):
        return _build_section(expected, value, path)
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"expected true/false, got {value!r}", field=path)
        return value
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"expected an integer, got {value!r}", field=path)
        return value
    if expected is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"expected a number, got {value!r}", field=path)
        return float(value)
    if expected is str:
        if not isinstance(value, str):
            raise ConfigError(f"expected a string, got {value!r}", field=path)
        return value
    raise ConfigError(f"unsupported field type {_type_name(expected)}", field=path)


def _build_section(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object, got {type(data).__name__}", field=path or None)
    hints = typing.get_type_hints(cls)
    known = {f.name: f for f in fields(cls)}

    unknown = sorted(set(data) - set(known))
    if unknown:
        key = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ConfigError(f"unknown key (allowed: {', '.join(sorted(known))})", field=key)

    kwargs = {}
    for name, f in known.items():
        key = f"{path}.{name}" if path else name
        if name not in data:
            if f.default is MISSING and f.default_factory is MISSING:
                raise ConfigError("missing required key", field=key)
            continue
        kwargs[name] = _coerce(data[name], hints[name], key)
    return cls(**kwargs)


def _env_int(name: str) -> Optional[int]:
    raw = os.getenv(name)
    if raw is None or raw == '':
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"environment variable {name} must be an integer, got '{raw}'", field=name)


def parse_experiment_config(document: Dict[str, Any]) -> ExperimentConfig:
    config = _build_section(ExperimentConfig, document, '')
    config.validate()
    return config


def load_experiment_config(path: Optional[str], seed: Optional[int] = None, out_dir: Optional[str] = None,
                           threads: Optional[int] = None) -> ExperimentConfig:
    """
    Load and validate a run document, then apply overrides: explicit
    arguments first, then DYNATTN_OUT_DIR / DYNATTN_THREADS.
    """
    path = path or os.getenv(ENV_CONFIG)
    if not path:
        raise ConfigError(f"no config document given (use --config or set {ENV_CONFIG})", field='config')
    if not os.path.exists(path):
        raise ConfigError(f"config document not found: {path}", field='config')

    logger.info(f"Loading experiment configuration from {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            document = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON in {path}: {e}", field='config')

    config = parse_experiment_config(document)

    env_threads = _env_int(ENV_THREADS)
    if seed is not None:
        config.seed = seed
    if out_dir or os.getenv(ENV_OUT_DIR):
        config.io.out_dir = out_dir or os.getenv(ENV_OUT_DIR)
    if threads is not None or env_threads is not None:
        config.threads = threads if threads is not None else env_threads
    if config.threads < 1:
        raise ConfigError("threads must be at least 1", field='threads')

    logger.info(f"Configuration validated: task={config.model.task}, seed={config.seed}, "
                f"out_dir={config.io.out_dir}, hash={config.config_hash()[:12]}")
    return config


def m_ranges(config: ExperimentConfig) -> List[Tuple[float, float]]:
    return [(float(lo), float(hi)) for lo, hi in config.eval.m_ranges]
