"""
Dynamic attention rectification, defensive dropout and their fusion.

A forward pass asks its hook twice per sublayer stack: once with the freshly
computed attention maps of a layer (``attention``) and once for every
sublayer output (``sublayer``). The static hook changes nothing; the
rectifier scales the columns of the selected key tokens by beta; dropout
zeroes sublayer outputs; fusion does both.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import ConfigError, ShapeError
from numerics import RandomSource, discrete_uniform

logger = logging.getLogger(__name__)

CLASSIFICATION_RULE = "classification"
GENERATION_RULE = "generation"

STATIC = "static"
DYNATTN = "dynattn"
DROPOUT = "dropout"
FUSION = "fusion"
MODES = (STATIC, DYNATTN, DROPOUT, FUSION)

# floor(frac * n) guard against 0.29 * 100 = 28.999999999999996
_FLOOR_TOLERANCE = 1e-9


@dataclass(frozen=True)
class RectifierConfig:
    task_rule: str = CLASSIFICATION_RULE
    beta: float = 0.0
    frac_lo: float = 0.1
    frac_hi: float = 0.2
    m_a_frac: float = 0.1
    m_b_lo_frac: float = 0.3
    m_b_hi_frac: float = 0.5

    def __post_init__(self):
        if self.task_rule not in (CLASSIFICATION_RULE, GENERATION_RULE):
            raise ConfigError(f"unknown task rule '{self.task_rule}'", field="defense.task_rule")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {self.beta}", field="defense.beta")
        if not 0.0 <= self.frac_lo <= self.frac_hi <= 1.0:
            raise ConfigError(f"need 0 <= m_lo <= m_hi <= 1, got [{self.frac_lo}, {self.frac_hi}]",
                              field="defense.m_lo")
        if not 0.0 <= self.m_a_frac <= self.m_b_lo_frac <= self.m_b_hi_frac <= 1.0:
            raise ConfigError("need 0 <= m_a <= m_b_lo <= m_b_hi <= 1", field="defense.m_a")

    @classmethod
    def for_generation(cls, beta: float = 0.6, m_a_frac: float = 0.1,
                       m_b_lo_frac: float = 0.3, m_b_hi_frac: float = 0.5) -> "RectifierConfig":
        return cls(task_rule=GENERATION_RULE, beta=beta, m_a_frac=m_a_frac,
                   m_b_lo_frac=m_b_lo_frac, m_b_hi_frac=m_b_hi_frac)


@dataclass(frozen=True)
class DynamicMode:
    kind: str = STATIC
    rectifier: Optional[RectifierConfig] = None
    dropout_rate: float = 0.1
    rectify_decoder: bool = False

    def __post_init__(self):
        if self.kind not in MODES:
            raise ConfigError(f"unknown mode '{self.kind}', expected one of {MODES}", field="defense.mode")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}", field="defense.dropout_rate")
        if self.kind in (DYNATTN, FUSION) and self.rectifier is None:
            raise ConfigError(f"mode '{self.kind}' needs a rectifier config", field="defense")

    @classmethod
    def static(cls) -> "DynamicMode":
        return cls(STATIC)

    @classmethod
    def dynattn(cls, rectifier: Optional[RectifierConfig] = None, rectify_decoder: bool = False) -> "DynamicMode":
        return cls(DYNATTN, rectifier or RectifierConfig(), rectify_decoder=rectify_decoder)

    @classmethod
    def dropout(cls, rate: float = 0.1, rectify_decoder: bool = False) -> "DynamicMode":
        return cls(DROPOUT, None, rate, rectify_decoder=rectify_decoder)

    @classmethod
    def fusion(cls, rectifier: Optional[RectifierConfig] = None, rate: float = 0.1,
               rectify_decoder: bool = False) -> "DynamicMode":
        return cls(FUSION, rectifier or RectifierConfig(), rate, rectify_decoder=rectify_decoder)

    @property
    def is_dynamic(self) -> bool:
        return self.kind != STATIC

    def describe(self) -> str:
        if self.kind == STATIC:
            return STATIC
        parts = [self.kind]
        if self.rectifier is not None and self.kind in (DYNATTN, FUSION):
            r = self.rectifier
            if r.task_rule == CLASSIFICATION_RULE:
                parts.append(f"beta={r.beta:g},m=[{r.frac_lo:g},{r.frac_hi:g}]")
            else:
                parts.append(f"beta={r.beta:g},m_a={r.m_a_frac:g},m_b=[{r.m_b_lo_frac:g},{r.m_b_hi_frac:g}]")
        if self.kind in (DROPOUT, FUSION):
            parts.append(f"rate={self.dropout_rate:g}")
        return ":".join(parts)


@dataclass(frozen=True)
class TokenSelection:
    layer: int
    indices: Tuple[int, ...]
    m: int
    key_totals: np.ndarray = field(compare=False, repr=False)


# ---------------------------------------------------------------------------
# Mechanism
# ---------------------------------------------------------------------------

def global_attention(heads: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise sum of the per-head maps of one layer."""
    heads = np.asarray(heads, dtype=np.float64)
    if heads.ndim != 3 or heads.shape[0] < 1:
        raise ShapeError(f"expected a (heads, n, n) stack with at least one head, got shape {heads.shape}")
    return np.sum(heads, axis=0)


def key_totals(a: np.ndarray) -> np.ndarray:
    """A_s[j]: total attention key j receives, summed over queries."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"key_totals expects a square matrix, got shape {a.shape}")
    return np.sum(a, axis=0)


def fraction_floor(frac: float, n: int) -> int:
    return int(math.floor(frac * n + _FLOOR_TOLERANCE))


def sample_m(rng: RandomSource, frac_lo: float, frac_hi: float, n: int) -> int:
    """Uniform m in [floor(frac_lo * n), floor(frac_hi * n)]."""
    return discrete_uniform(rng, fraction_floor(frac_lo, n), fraction_floor(frac_hi, n))


def rank_tokens(a_s: np.ndarray, special_mask: Sequence[bool]) -> List[int]:
    """Non-special indices by A_s descending, ties to the lower index."""
    a_s = np.asarray(a_s)
    mask = np.asarray(special_mask, dtype=bool)
    if a_s.shape[0] != mask.shape[0]:
        raise ShapeError(f"A_s length {a_s.shape[0]} != special mask length {mask.shape[0]}")
    candidates = np.flatnonzero(~mask)
    order = np.lexsort((candidates, -a_s[candidates]))
    return [int(candidates[i]) for i in order]


def select_tokens(a_s: np.ndarray, special_mask: Sequence[bool], m: int, m_a: int = 0) -> Tuple[int, ...]:
    """
    Ranks m_a+1 .. m of the non-special tokens (m_a = 0 is the classification
    rule). Both bounds are capped by the number of non-special tokens.
    """
    ranked = rank_tokens(a_s, special_mask)
    m = min(max(m, 0), len(ranked))
    m_a = min(max(m_a, 0), m)
    return tuple(sorted(ranked[m_a:m]))


def rectify(heads: np.ndarray, indices: Sequence[int], beta: float) -> np.ndarray:
    """Scale key columns in ``indices`` by beta in every head; rows are not renormalized."""
    heads = np.asarray(heads)
    n = heads.shape[-1]
    if any(not 0 <= j < n for j in indices):
        raise ShapeError(f"token index out of range for {n} tokens: {sorted(indices)}")
    out = heads.copy()
    if len(indices):
        out[..., list(indices)] *= beta
    return out


def dropout_mask(shape: Tuple[int, ...], rate: float, rng: RandomSource) -> Optional[np.ndarray]:
    """Inverted-dropout multiplier (0 or 1/(1-rate)); None when rate is 0."""
    if rate == 0:
        return None
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def defensive_dropout(hidden: np.ndarray, rate: float, rng: RandomSource) -> np.ndarray:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}", field="defense.dropout_rate")
    mask = dropout_mask(hidden.shape, rate, rng)
    return hidden if mask is None else hidden * mask


def top_attentive(stack: Sequence[np.ndarray], special_mask: Sequence[bool],
                  last_k: int = 6, top: int = 5) -> List[List[int]]:
    """Top non-special tokens by A_s for each of the last ``last_k`` layers (all layers when fewer)."""
    layers = list(stack)[-last_k:] if last_k < len(stack) else list(stack)
    return [rank_tokens(key_totals(global_attention(heads)), special_mask)[:top] for heads in layers]


def attention_flatness(heads: np.ndarray) -> float:
    """Standard deviation of A_s over all tokens of one layer."""
    return float(np.std(key_totals(global_attention(heads))))


# ---------------------------------------------------------------------------
# Hooks
# ---------------------------------------------------------------------------

class DefenseHook:
    """The static model: attention maps and sublayer outputs pass through untouched."""

    name = STATIC

    def attention(self, layer: int, heads: np.ndarray, special_mask: np.ndarray,
                  rng: Optional[RandomSource]) -> Tuple[np.ndarray, Optional[TokenSelection]]:
        return heads, None

    def sublayer(self, hidden: np.ndarray, rng: Optional[RandomSource]) -> np.ndarray:
        return hidden


class RectifierHook(DefenseHook):
    name = DYNATTN

    def __init__(self, config: RectifierConfig):
        self.config = config

    def attention(self, layer, heads, special_mask, rng):
        cfg = self.config
        n = int(np.sum(~special_mask))
        a_s = key_totals(global_attention(heads))
        if cfg.task_rule == CLASSIFICATION_RULE:
            m = sample_m(rng, cfg.frac_lo, cfg.frac_hi, n)
            indices = select_tokens(a_s, special_mask, m)
        else:
            m = sample_m(rng, cfg.m_b_lo_frac, cfg.m_b_hi_frac, n)
            indices = select_tokens(a_s, special_mask, m, fraction_floor(cfg.m_a_frac, n))
        selection = TokenSelection(layer=layer, indices=indices, m=m, key_totals=a_s)
        if not indices:
            return heads, selection
        return rectify(heads, indices, cfg.beta), selection


class DropoutHook(DefenseHook):
    name = DROPOUT

    def __init__(self, rate: float):
        self.rate = rate

    def sublayer(self, hidden, rng):
        return defensive_dropout(hidden, self.rate, rng)


class FusionHook(DefenseHook):
    """Rectification at the attention stage, then dropout at the sublayer outputs of the same pass."""

    name = FUSION

    def __init__(self, config: RectifierConfig, rate: float):
        self.rectifier = RectifierHook(config)
        self.dropout = DropoutHook(rate)

    def attention(self, layer, heads, special_mask, rng):
        return self.rectifier.attention(layer, heads, special_mask, rng)

    def sublayer(self, hidden, rng):
        return self.dropout.sublayer(hidden, rng)


def compose_fusion(config: RectifierConfig, rate: float) -> FusionHook:
    if not 0.0 <= rate < 1.0:
        raise ConfigError(f"dropout rate must lie in [0, 1), got {rate}", field="defense.dropout_rate")
    return FusionHook(config, rate)


STATIC_HOOK = DefenseHook()


def build_hook(mode: DynamicMode) -> DefenseHook:
    if mode.kind == STATIC:
        return STATIC_HOOK
    if mode.kind == DYNATTN:
        return RectifierHook(mode.rectifier)
    if mode.kind == DROPOUT:
        return DropoutHook(mode.dropout_rate)
    return compose_fusion(mode.rectifier, mode.dropout_rate)
