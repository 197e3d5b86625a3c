"""
A small trainable transformer in numpy: an encoder classifier and an
encoder-decoder generator, with hand-derived gradients.

Sublayer ordering is post-LN (as in BERT):

    h1  = LN1(x  + Drop(MHA(x)))
    out = LN2(h1 + Drop(FFN(h1)))

Decoder layers insert a cross-attention sublayer between self-attention and
the FFN. Every attention map passes through a defense hook (see dynattn)
before it multiplies the values, and every sublayer output passes through
the hook's dropout site.
"""

import json
import logging
import math
import os
import struct
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from dynattn import STATIC_HOOK, DefenseHook, DynamicMode, TokenSelection, build_hook, dropout_mask
from errors import AlignmentError, ConfigError, FormatError, ShapeError, TaskError, TrainingError
from numerics import RandomSource, derive_seed, layer_norm, make_rng, softmax_rows
from textdata import (BOS, CLASSIFICATION, EOS, SEQ2SEQ_SOURCE, SPECIAL_TOKENS, LabeledCorpus,
                      TokenSequence, Vocabulary, ids_to_words, tokenize)

logger = logging.getLogger(__name__)

CLASSIFIER = "classifier"
SEQ2SEQ = "seq2seq"

BOS_ID = SPECIAL_TOKENS.index(BOS)
EOS_ID = SPECIAL_TOKENS.index(EOS)

CHECKPOINT_MAGIC = b"DYNATTN1"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    layers: int = 2
    heads: int = 2
    d_model: int = 32
    d_ff: int = 64
    vocab_size: int = 64
    max_len: int = 32
    task: str = CLASSIFIER
    classes: int = 2
    decoder_layers: int = 0
    ln_eps: float = 1e-5
    train_dropout: float = 0.1

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError(f"d_model={self.d_model} is not divisible by heads={self.heads}", field="model.d_model")
        if self.task not in (CLASSIFIER, SEQ2SEQ):
            raise ConfigError(f"unknown task '{self.task}'", field="model.task")
        if self.task == CLASSIFIER and self.classes < 2:
            raise ConfigError("a classifier needs at least 2 classes", field="model.classes")
        if self.task == SEQ2SEQ and self.decoder_layers < 1:
            raise ConfigError("a seq2seq model needs at least one decoder layer", field="model.decoder_layers")
        for name in ("layers", "heads", "d_model", "d_ff", "vocab_size", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive", field=f"model.{name}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass
class ModelParams:
    """Named float64 tensors; frozen (read-only arrays) once training or loading finishes."""
    config: ModelConfig
    tensors: Dict[str, np.ndarray]
    history: List[float] = field(default_factory=list, compare=False, repr=False)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> List[str]:
        return list(self.tensors)

    def copy(self) -> "ModelParams":
        return ModelParams(self.config, {name: t.copy() for name, t in self.tensors.items()}, list(self.history))

    def freeze(self) -> "ModelParams":
        for tensor in self.tensors.values():
            tensor.setflags(write=False)
        return self

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))


@dataclass
class RunContext:
    """Private per-task state: the random source behind dynamic states and the query counter."""
    seed: int
    rng: RandomSource = field(default=None, repr=False)
    queries: int = 0

    def __post_init__(self):
        if self.rng is None:
            self.rng = make_rng(self.seed)

    @classmethod
    def from_seed(cls, seed: int, label: str = "", index: int = 0) -> "RunContext":
        return cls(derive_seed(seed, label, index) if label else seed)

    def fork(self, label: str, index: int = 0) -> "RunContext":
        return RunContext.from_seed(self.seed, label, index)


@dataclass
class ForwardOutput:
    logits: np.ndarray
    confidences: np.ndarray
    attention: List[np.ndarray]
    raw_attention: List[np.ndarray] = field(repr=False)
    selection_trace: List[TokenSelection] = field(default_factory=list)

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.confidences))

    @property
    def confidence(self) -> float:
        return float(np.max(self.confidences))


@dataclass
class GenerationOutput:
    tokens: List[int]
    steps: List[ForwardOutput]
    encoder_attention: List[np.ndarray] = field(default_factory=list, repr=False)
    encoder_trace: List[TokenSelection] = field(default_factory=list)


@dataclass(frozen=True)
class TrainHyper:
    lr: float = 0.1
    epochs: int = 12
    batch: int = 16
    seed: int = 0
    clip_norm: float = 5.0


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _attention_shapes(prefix: str, d: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f"{prefix}.{w}", (d, d)) for w in ("wq", "wk", "wv", "wo")]


def _ln_shapes(prefix: str, d: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f"{prefix}.gain", (d,)), (f"{prefix}.bias", (d,))]


def _ffn_shapes(prefix: str, d: int, d_ff: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f"{prefix}.w1", (d, d_ff)), (f"{prefix}.b1", (d_ff,)),
            (f"{prefix}.w2", (d_ff, d)), (f"{prefix}.b2", (d,))]


def param_shapes(cfg: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    d = cfg.d_model
    shapes = [("embed.tokens", (cfg.vocab_size, d)), ("embed.positions", (cfg.max_len, d))]
    for layer in range(cfg.layers):
        prefix = f"enc.{layer}"
        shapes += _attention_shapes(f"{prefix}.attn", d)
        shapes += _ln_shapes(f"{prefix}.ln1", d)
        shapes += _ffn_shapes(f"{prefix}.ffn", d, cfg.d_ff)
        shapes += _ln_shapes(f"{prefix}.ln2", d)
    if cfg.task == CLASSIFIER:
        shapes += [("head.w", (d, cfg.classes)), ("head.b", (cfg.classes,))]
    else:
        for layer in range(cfg.decoder_layers):
            prefix = f"dec.{layer}"
            shapes += _attention_shapes(f"{prefix}.self", d)
            shapes += _ln_shapes(f"{prefix}.ln1", d)
            shapes += _attention_shapes(f"{prefix}.cross", d)
            shapes += _ln_shapes(f"{prefix}.ln2", d)
            shapes += _ffn_shapes(f"{prefix}.ffn", d, cfg.d_ff)
            shapes += _ln_shapes(f"{prefix}.ln3", d)
        shapes += [("out.w", (d, cfg.vocab_size)), ("out.b", (cfg.vocab_size,))]
    return shapes


def init_params(cfg: ModelConfig, rng: RandomSource) -> ModelParams:
    """Weights uniform in +-1/sqrt(fan_in) (embeddings use d_model), biases 0, layer-norm gains 1."""
    tensors: Dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".gain"):
            tensors[name] = np.ones(shape)
        elif name.endswith(".bias") or name.endswith(".b1") or name.endswith(".b2") or name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in = cfg.d_model if name.startswith("embed.") else shape[0]
            limit = 1.0 / math.sqrt(fan_in)
            tensors[name] = rng.uniform(-limit, limit, size=shape)
    return ModelParams(cfg, tensors)


# ---------------------------------------------------------------------------
# Building blocks (forward returns a cache, backward accumulates into grads)
# ---------------------------------------------------------------------------

def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    n, d = x.shape
    return x.reshape(n, heads, d // heads).transpose(1, 0, 2)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    heads, n, dh = x.shape
    return x.transpose(1, 0, 2).reshape(n, heads * dh)


def _causal_mask(n: int) -> np.ndarray:
    return np.triu(np.full((n, n), -np.inf), k=1)


def _ln_forward(x, gain, bias, eps):
    y = layer_norm(x, gain, bias, eps)
    mean = np.mean(x, axis=-1, keepdims=True)
    std = np.sqrt(np.var(x, axis=-1, keepdims=True) + eps)
    return y, ((x - mean) / std, std, gain)


def _ln_backward(dy, cache, p_prefix, grads):
    xhat, std, gain = cache
    dxhat = dy * gain
    dx = (dxhat - np.mean(dxhat, axis=-1, keepdims=True)
          - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)) / std
    if grads is not None:
        grads[f"{p_prefix}.gain"] += np.sum(dy * xhat, axis=0)
        grads[f"{p_prefix}.bias"] += np.sum(dy, axis=0)
    return dx


def _ffn_forward(x, p, prefix):
    hidden = x @ p[f"{prefix}.w1"] + p[f"{prefix}.b1"]
    active = np.maximum(hidden, 0.0)
    return active @ p[f"{prefix}.w2"] + p[f"{prefix}.b2"], (x, hidden, active)


def _ffn_backward(dout, cache, p, prefix, grads):
    x, hidden, active = cache
    dactive = dout @ p[f"{prefix}.w2"].T
    dhidden = dactive * (hidden > 0)
    if grads is not None:
        grads[f"{prefix}.w2"] += active.T @ dout
        grads[f"{prefix}.b2"] += np.sum(dout, axis=0)
        grads[f"{prefix}.w1"] += x.T @ dhidden
        grads[f"{prefix}.b1"] += np.sum(dhidden, axis=0)
    return dhidden @ p[f"{prefix}.w1"].T


def _mha_forward(xq, xkv, p, prefix, heads, causal, hook, layer, special_mask, rng, injected=None):
    q = _split_heads(xq @ p[f"{prefix}.wq"], heads)
    k = _split_heads(xkv @ p[f"{prefix}.wk"], heads)
    v = _split_heads(xkv @ p[f"{prefix}.wv"], heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = q @ k.transpose(0, 2, 1)
    if causal:
        scores = scores + _causal_mask(scores.shape[-1])
    probs = softmax_rows(scores, scale)

    selection = None
    if injected is not None:
        used = injected
    else:
        used, selection = hook.attention(layer, probs, special_mask, rng)
    merged = _merge_heads(used @ v)
    out = merged @ p[f"{prefix}.wo"]
    return out, probs, used, selection, (xq, xkv, q, k, v, probs, used, merged, scale)


def _mha_backward(dout, cache, p, prefix, grads):
    xq, xkv, q, k, v, probs, used, merged, scale = cache
    if used is not probs:
        raise ShapeError("gradients are only defined for unmodified attention maps")
    heads = q.shape[0]
    dmerged = dout @ p[f"{prefix}.wo"].T
    dctx = _split_heads(dmerged, heads)
    dprobs = dctx @ v.transpose(0, 2, 1)
    dv = probs.transpose(0, 2, 1) @ dctx
    dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True)) * scale
    dq = dscores @ k
    dk = dscores.transpose(0, 2, 1) @ q
    dQ, dK, dV = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    if grads is not None:
        grads[f"{prefix}.wo"] += merged.T @ dout
        grads[f"{prefix}.wq"] += xq.T @ dQ
        grads[f"{prefix}.wk"] += xkv.T @ dK
        grads[f"{prefix}.wv"] += xkv.T @ dV
    dxq = dQ @ p[f"{prefix}.wq"].T
    dxkv = dK @ p[f"{prefix}.wk"].T + dV @ p[f"{prefix}.wv"].T
    return dxq, dxkv


def _sublayer_output(x, hook, rng, train_rate):
    """Training dropout when train_rate > 0, else whatever the defense hook does."""
    if train_rate > 0:
        mask = dropout_mask(x.shape, train_rate, rng)
        return x * mask, mask
    return hook.sublayer(x, rng), None


def _encoder_layer_forward(x, p, cfg, layer, hook, special_mask, rng, injected=None, train_rate=0.0):
    prefix = f"enc.{layer}"
    a_out, raw, used, selection, attn_cache = _mha_forward(
        x, x, p, f"{prefix}.attn", cfg.heads, False, hook, layer, special_mask, rng, injected)
    a_out, mask1 = _sublayer_output(a_out, hook, rng, train_rate)
    h1, ln1_cache = _ln_forward(x + a_out, p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"], cfg.ln_eps)
    f_out, ffn_cache = _ffn_forward(h1, p, f"{prefix}.ffn")
    f_out, mask2 = _sublayer_output(f_out, hook, rng, train_rate)
    out, ln2_cache = _ln_forward(h1 + f_out, p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"], cfg.ln_eps)
    cache = (attn_cache, mask1, ln1_cache, ffn_cache, mask2, ln2_cache)
    return out, raw, used, selection, cache


def _encoder_layer_backward(dout, cache, p, layer, grads):
    prefix = f"enc.{layer}"
    attn_cache, mask1, ln1_cache, ffn_cache, mask2, ln2_cache = cache
    dsum2 = _ln_backward(dout, ln2_cache, f"{prefix}.ln2", grads)
    df = dsum2 * mask2 if mask2 is not None else dsum2
    dh1 = dsum2 + _ffn_backward(df, ffn_cache, p, f"{prefix}.ffn", grads)
    dsum1 = _ln_backward(dh1, ln1_cache, f"{prefix}.ln1", grads)
    da = dsum1 * mask1 if mask1 is not None else dsum1
    dxq, dxkv = _mha_backward(da, attn_cache, p, f"{prefix}.attn", grads)
    return dsum1 + dxq + dxkv


def _decoder_layer_forward(y, memory, p, cfg, layer, hook, special_mask, memory_mask, rng, train_rate=0.0):
    prefix = f"dec.{layer}"
    s_out, raw, used, selection, self_cache = _mha_forward(
        y, y, p, f"{prefix}.self", cfg.heads, True, hook, layer, special_mask, rng)
    s_out, mask1 = _sublayer_output(s_out, hook, rng, train_rate)
    h1, ln1_cache = _ln_forward(y + s_out, p[f"{prefix}.ln1.gain"], p[f"{prefix}.ln1.bias"], cfg.ln_eps)
    c_out, _, _, _, cross_cache = _mha_forward(
        h1, memory, p, f"{prefix}.cross", cfg.heads, False, STATIC_HOOK, layer, memory_mask, rng)
    c_out, mask2 = _sublayer_output(c_out, hook, rng, train_rate)
    h2, ln2_cache = _ln_forward(h1 + c_out, p[f"{prefix}.ln2.gain"], p[f"{prefix}.ln2.bias"], cfg.ln_eps)
    f_out, ffn_cache = _ffn_forward(h2, p, f"{prefix}.ffn")
    f_out, mask3 = _sublayer_output(f_out, hook, rng, train_rate)
    out, ln3_cache = _ln_forward(h2 + f_out, p[f"{prefix}.ln3.gain"], p[f"{prefix}.ln3.bias"], cfg.ln_eps)
    cache = (self_cache, mask1, ln1_cache, cross_cache, mask2, ln2_cache, ffn_cache, mask3, ln3_cache)
    return out, raw, used, selection, cache


def _decoder_layer_backward(dout, cache, p, layer, grads):
    prefix = f"dec.{layer}"
    self_cache, mask1, ln1_cache, cross_cache, mask2, ln2_cache, ffn_cache, mask3, ln3_cache = cache
    dsum3 = _ln_backward(dout, ln3_cache, f"{prefix}.ln3", grads)
    df = dsum3 * mask3 if mask3 is not None else dsum3
    dh2 = dsum3 + _ffn_backward(df, ffn_cache, p, f"{prefix}.ffn", grads)
    dsum2 = _ln_backward(dh2, ln2_cache, f"{prefix}.ln2", grads)
    dc = dsum2 * mask2 if mask2 is not None else dsum2
    dh1_cross, dmemory = _mha_backward(dc, cross_cache, p, f"{prefix}.cross", grads)
    dh1 = dsum2 + dh1_cross
    dsum1 = _ln_backward(dh1, ln1_cache, f"{prefix}.ln1", grads)
    ds = dsum1 * mask1 if mask1 is not None else dsum1
    dyq, dykv = _mha_backward(ds, self_cache, p, f"{prefix}.self", grads)
    return dsum1 + dyq + dykv, dmemory


def _embed(ids, p, noise=None):
    tokens = p["embed.tokens"][list(ids)]
    if noise is not None:
        tokens = tokens + noise
    return tokens + p["embed.positions"][: len(ids)]


def _embed_backward(ids, dx, grads):
    if grads is None:
        return
    np.add.at(grads["embed.tokens"], list(ids), dx)
    grads["embed.positions"][: len(ids)] += dx


def _encode(ids, special_mask, p, cfg, hook, rng, injected=None, train_rate=0.0, noise=None):
    x = _embed(ids, p, noise)
    raw_maps, used_maps, trace, caches = [], [], [], []
    for layer in range(cfg.layers):
        x, raw, used, selection, cache = _encoder_layer_forward(
            x, p, cfg, layer, hook, special_mask, rng,
            injected[layer] if injected is not None else None, train_rate)
        raw_maps.append(raw)
        used_maps.append(used)
        caches.append(cache)
        if selection is not None:
            trace.append(selection)
    return x, raw_maps, used_maps, trace, caches


def _encode_backward(ids, dx, caches, p, grads):
    for layer in reversed(range(len(caches))):
        dx = _encoder_layer_backward(dx, caches[layer], p, layer, grads)
    _embed_backward(ids, dx, grads)


def _decode(tgt_ids, tgt_mask, memory, memory_mask, p, cfg, hook, rng, train_rate=0.0):
    y = _embed(tgt_ids, p)
    raw_maps, used_maps, trace, caches = [], [], [], []
    for layer in range(cfg.decoder_layers):
        y, raw, used, selection, cache = _decoder_layer_forward(
            y, memory, p, cfg, layer, hook, tgt_mask, memory_mask, rng, train_rate)
        raw_maps.append(raw)
        used_maps.append(used)
        caches.append(cache)
        if selection is not None:
            trace.append(selection)
    return y, raw_maps, used_maps, trace, caches


def _check_length(n: int, cfg: ModelConfig):
    if n > cfg.max_len:
        raise ShapeError(f"sequence of {n} tokens exceeds max_len={cfg.max_len}")


def _require_task(params: ModelParams, task: str):
    if params.config.task != task:
        raise TaskError(f"operation needs a {task} model, got a {params.config.task} model")


def _softmax(logits: np.ndarray) -> np.ndarray:
    return softmax_rows(logits, 1.0)


# ---------------------------------------------------------------------------
# Public forward passes
# ---------------------------------------------------------------------------

def attention_layer(x: np.ndarray, params: ModelParams, layer: int, hook: DefenseHook = STATIC_HOOK,
                    special_mask: Optional[np.ndarray] = None,
                    rng: Optional[RandomSource] = None) -> Tuple[np.ndarray, np.ndarray]:
    """One encoder layer on hidden states x (n x d_model); returns the output and the maps the values saw."""
    _check_length(x.shape[0], params.config)
    if special_mask is None:
        special_mask = np.zeros(x.shape[0], dtype=bool)
    out, _, used, _, _ = _encoder_layer_forward(x, params.tensors, params.config, layer, hook, special_mask, rng)
    return out, used


def forward_classify(seq: TokenSequence, params: ModelParams, mode: DynamicMode = DynamicMode(),
                     ctx: Optional[RunContext] = None, embedding_noise: Optional[np.ndarray] = None,
                     hook: Optional[DefenseHook] = None) -> ForwardOutput:
    """
    One query: classify from the [CLS] position. Dynamic modes draw from the
    context's random source (m per layer, dropout masks per sublayer).
    """
    _require_task(params, CLASSIFIER)
    cfg = params.config
    _check_length(len(seq), cfg)
    hook = hook or build_hook(mode)
    if mode.is_dynamic and ctx is None:
        raise ConfigError(f"mode '{mode.kind}' needs a RunContext", field="defense.mode")
    rng = ctx.rng if ctx is not None else None

    h, raw, used, trace, _ = _encode(seq.ids, seq.mask_array(), params.tensors, cfg, hook, rng,
                                     noise=embedding_noise)
    logits = h[0] @ params["head.w"] + params["head.b"]
    if ctx is not None:
        ctx.queries += 1
    return ForwardOutput(logits=logits, confidences=_softmax(logits), attention=used,
                         raw_attention=raw, selection_trace=trace)


def inject_attention(seq: TokenSequence, params: ModelParams, replacement: Sequence[np.ndarray],
                     ctx: Optional[RunContext] = None) -> ForwardOutput:
    """Static forward that uses the supplied maps instead of softmax(QK^T) in every layer."""
    _require_task(params, CLASSIFIER)
    cfg = params.config
    n = len(seq)
    _check_length(n, cfg)
    if len(replacement) != cfg.layers:
        raise AlignmentError(f"replacement has {len(replacement)} layers, model has {cfg.layers}")
    for layer, maps in enumerate(replacement):
        if np.shape(maps) != (cfg.heads, n, n):
            raise AlignmentError(
                f"layer {layer}: replacement maps have shape {np.shape(maps)}, need {(cfg.heads, n, n)}")

    h, raw, used, _, _ = _encode(seq.ids, seq.mask_array(), params.tensors, cfg, STATIC_HOOK, None,
                                 injected=list(replacement))
    logits = h[0] @ params["head.w"] + params["head.b"]
    if ctx is not None:
        ctx.queries += 1
    return ForwardOutput(logits=logits, confidences=_softmax(logits), attention=used, raw_attention=raw)


def forward_generate(src: TokenSequence, params: ModelParams, mode: DynamicMode = DynamicMode(),
                     ctx: Optional[RunContext] = None, max_steps: int = 16) -> GenerationOutput:
    """
    Greedy decoding until EOS or max_steps. The encoder runs once with the
    defense hook; the decoder uses it only when ``mode.rectify_decoder`` is set.
    """
    _require_task(params, SEQ2SEQ)
    cfg = params.config
    _check_length(len(src), cfg)
    if mode.is_dynamic and ctx is None:
        raise ConfigError(f"mode '{mode.kind}' needs a RunContext", field="defense.mode")
    if ctx is not None:
        ctx.queries += 1
    if max_steps <= 0:
        return GenerationOutput(tokens=[], steps=[])

    rng = ctx.rng if ctx is not None else None
    hook = build_hook(mode)
    decoder_hook = hook if mode.rectify_decoder else STATIC_HOOK
    memory_mask = src.mask_array()
    memory, _, enc_used, enc_trace, _ = _encode(src.ids, memory_mask, params.tensors, cfg, hook, rng)

    prefix = [BOS_ID]
    tokens: List[int] = []
    steps: List[ForwardOutput] = []
    for _ in range(max_steps):
        if len(prefix) > cfg.max_len:
            break
        tgt_mask = np.array([token_id < len(SPECIAL_TOKENS) for token_id in prefix], dtype=bool)
        y, raw, used, trace, _ = _decode(prefix, tgt_mask, memory, memory_mask, params.tensors, cfg,
                                         decoder_hook, rng)
        logits = y[-1] @ params["out.w"] + params["out.b"]
        step = ForwardOutput(logits=logits, confidences=_softmax(logits), attention=used,
                             raw_attention=raw, selection_trace=trace)
        steps.append(step)
        next_id = step.prediction
        if next_id == EOS_ID:
            break
        tokens.append(next_id)
        prefix.append(next_id)
    return GenerationOutput(tokens=tokens, steps=steps, encoder_attention=enc_used, encoder_trace=enc_trace)


# ---------------------------------------------------------------------------
# Served model
# ---------------------------------------------------------------------------

class Victim:
    """
    A served model: parameters, vocabulary, a defense mode and a private
    RunContext. Attacks and evaluation talk to models only through victims,
    so ``queries`` counts every forward they cause.
    """

    def __init__(self, params: ModelParams, vocab: Vocabulary, mode: DynamicMode = DynamicMode(),
                 ctx: Optional[RunContext] = None, name: str = "victim"):
        self.params = params
        self.vocab = vocab
        self.mode = mode
        self.ctx = ctx or RunContext(0)
        self.name = name
        self._hook = build_hook(mode)

    @property
    def queries(self) -> int:
        return self.ctx.queries

    @property
    def task(self) -> str:
        return self.params.config.task

    def with_mode(self, mode: DynamicMode, ctx: Optional[RunContext] = None, name: Optional[str] = None) -> "Victim":
        return Victim(self.params, self.vocab, mode, ctx or self.ctx, name or self.name)

    def encode(self, words: Sequence[str]) -> TokenSequence:
        mode = CLASSIFICATION if self.task == CLASSIFIER else SEQ2SEQ_SOURCE
        return tokenize(" ".join(words), self.vocab, mode, self.params.config.max_len)

    def classify(self, words: Sequence[str], embedding_noise: Optional[np.ndarray] = None) -> ForwardOutput:
        return forward_classify(self.encode(words), self.params, self.mode, self.ctx,
                                embedding_noise=embedding_noise, hook=self._hook)

    def generate(self, words: Sequence[str], max_steps: Optional[int] = None) -> GenerationOutput:
        steps = max_steps if max_steps is not None else self.params.config.max_len - 1
        return forward_generate(self.encode(words), self.params, self.mode, self.ctx, steps)

    def translate(self, words: Sequence[str], max_steps: Optional[int] = None) -> List[str]:
        return ids_to_words(self.generate(words, max_steps).tokens, self.vocab)


# ---------------------------------------------------------------------------
# Losses and gradients
# ---------------------------------------------------------------------------

def _zero_grads(params: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {name: np.zeros_like(t) for name, t in params.items()}


def classifier_loss(p: Dict[str, np.ndarray], cfg: ModelConfig, seq: TokenSequence, label: int,
                    grads: Optional[Dict[str, np.ndarray]] = None, rng: Optional[RandomSource] = None,
                    train_rate: float = 0.0) -> Tuple[float, np.ndarray]:
    """Cross-entropy of one example; accumulates d(loss)/d(param) into grads when given."""
    h, _, _, _, caches = _encode(seq.ids, seq.mask_array(), p, cfg, STATIC_HOOK, rng, train_rate=train_rate)
    logits = h[0] @ p["head.w"] + p["head.b"]
    probs = _softmax(logits)
    loss = -math.log(max(probs[label], 1e-300))
    if grads is not None:
        dlogits = probs.copy()
        dlogits[label] -= 1.0
        grads["head.w"] += np.outer(h[0], dlogits)
        grads["head.b"] += dlogits
        dh = np.zeros_like(h)
        dh[0] = p["head.w"] @ dlogits
        _encode_backward(seq.ids, dh, caches, p, grads)
    return loss, probs


def seq2seq_loss(p: Dict[str, np.ndarray], cfg: ModelConfig, src: TokenSequence, target_ids: Sequence[int],
                 grads: Optional[Dict[str, np.ndarray]] = None, rng: Optional[RandomSource] = None,
                 train_rate: float = 0.0) -> Tuple[float, np.ndarray]:
    """Mean per-step cross-entropy with teacher forcing: input [BOS] + y, targets y + [EOS]."""
    memory_mask = src.mask_array()
    memory, _, _, _, enc_caches = _encode(src.ids, memory_mask, p, cfg, STATIC_HOOK, rng, train_rate=train_rate)
    dec_in = [BOS_ID] + list(target_ids)
    targets = list(target_ids) + [EOS_ID]
    tgt_mask = np.array([token_id < len(SPECIAL_TOKENS) for token_id in dec_in], dtype=bool)
    y, _, _, _, dec_caches = _decode(dec_in, tgt_mask, memory, memory_mask, p, cfg, STATIC_HOOK, rng, train_rate)
    logits = y @ p["out.w"] + p["out.b"]
    probs = _softmax(logits)
    steps = np.arange(len(targets))
    loss = float(-np.mean(np.log(np.maximum(probs[steps, targets], 1e-300))))
    if grads is not None:
        dlogits = probs.copy()
        dlogits[steps, targets] -= 1.0
        dlogits /= len(targets)
        grads["out.w"] += y.T @ dlogits
        grads["out.b"] += np.sum(dlogits, axis=0)
        dy = dlogits @ p["out.w"].T
        dmemory = np.zeros_like(memory)
        for layer in reversed(range(cfg.decoder_layers)):
            dy, dmem = _decoder_layer_backward(dy, dec_caches[layer], p, layer, grads)
            dmemory += dmem
        _embed_backward(dec_in, dy, grads)
        _encode_backward(src.ids, dmemory, enc_caches, p, grads)
    return loss, probs


def _clip(grads: Dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads.values():
            g *= factor
    return norm


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def _prepare_examples(corpus, vocab: Vocabulary, cfg: ModelConfig):
    if cfg.task == CLASSIFIER:
        if not isinstance(corpus, LabeledCorpus):
            raise TaskError("a classifier trains on a LabeledCorpus")
        return [(tokenize(text, vocab, CLASSIFICATION, cfg.max_len), label) for text, label in corpus.items]
    examples = []
    for source, reference in corpus:
        target_ids = [vocab.id_of(word) for word in reference.split()][: cfg.max_len - 1]
        examples.append((tokenize(source, vocab, SEQ2SEQ_SOURCE, cfg.max_len), target_ids))
    return examples


def train(corpus: Union[LabeledCorpus, Sequence[Tuple[str, str]]], cfg: ModelConfig, hyper: TrainHyper,
          vocab: Vocabulary) -> ModelParams:
    """
    Minibatch SGD on manual gradients with dropout ``cfg.train_dropout`` at
    the sublayer outputs. Raises TrainingError when the loss stops being finite.
    """
    examples = _prepare_examples(corpus, vocab, cfg)
    if not examples:
        raise TrainingError("nothing to train on")
    params = init_params(cfg, make_rng(hyper.seed, "init"))
    p = params.tensors
    rng = make_rng(hyper.seed, "train")
    loss_fn = classifier_loss if cfg.task == CLASSIFIER else seq2seq_loss

    logger.info(f"[train] {cfg.task}: {len(examples)} examples, {params.count()} parameters, "
                f"lr={hyper.lr}, epochs={hyper.epochs}, batch={hyper.batch}")
    history = []
    for epoch in tqdm(range(hyper.epochs), desc="train", leave=False):
        order = rng.permutation(len(examples))
        total_loss = 0.0
        for start in range(0, len(order), hyper.batch):
            batch = order[start:start + hyper.batch]
            grads = _zero_grads(p)
            for index in batch:
                seq, target = examples[int(index)]
                loss, _ = loss_fn(p, cfg, seq, target, grads, rng, cfg.train_dropout)
                total_loss += loss
            for g in grads.values():
                g /= len(batch)
            norm = _clip(grads, hyper.clip_norm)
            if not math.isfinite(norm) or not math.isfinite(total_loss):
                logger.error(f"[train] loss diverged in epoch {epoch}")
                raise TrainingError("loss is not finite", epoch=epoch)
            for name, g in grads.items():
                p[name] -= hyper.lr * g
        mean_loss = total_loss / len(examples)
        history.append(mean_loss)
        logger.info(f"[train] epoch {epoch + 1}/{hyper.epochs}: mean loss {mean_loss:.4f}")

    params.history = history
    return params.freeze()


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

def grad_check(params: ModelParams, seq: TokenSequence, label: Union[int, Sequence[int]], eps: float = 1e-5,
               sample_fraction: float = 0.01, seed: int = 0, names: Optional[Sequence[str]] = None,
               floor: float = 1e-6) -> float:
    """
    Max relative error between analytic gradients and central differences on
    a random sample of parameter entries (dropout off). The denominator is
    max(|analytic|, |numeric|, floor), so zero-gradient entries report 0.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ConfigError(f"eps must lie in [1e-7, 1e-3], got {eps}", field="eps")
    cfg = params.config
    p = {name: t.copy() for name, t in params.tensors.items()}
    loss_fn = classifier_loss if cfg.task == CLASSIFIER else seq2seq_loss
    grads = _zero_grads(p)
    loss_fn(p, cfg, seq, label, grads)

    selected = [name for name in p if names is None or any(name.startswith(prefix) for prefix in names)]
    sizes = np.array([p[name].size for name in selected])
    total = int(sizes.sum())
    count = max(1, int(math.ceil(sample_fraction * total)))
    rng = make_rng(seed, "grad-check")
    flat_indices = np.sort(rng.choice(total, size=min(count, total), replace=False))
    offsets = np.concatenate([[0], np.cumsum(sizes)])

    worst = 0.0
    for flat in flat_indices:
        t = int(np.searchsorted(offsets, flat, side="right") - 1)
        name = selected[t]
        local = int(flat - offsets[t])
        tensor = p[name].reshape(-1)
        original = tensor[local]
        tensor[local] = original + eps
        plus, _ = loss_fn(p, cfg, seq, label)
        tensor[local] = original - eps
        minus, _ = loss_fn(p, cfg, seq, label)
        tensor[local] = original
        numeric = (plus - minus) / (2 * eps)
        analytic = float(grads[name].reshape(-1)[local])
        error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
        worst = max(worst, error)
    logger.info(f"[grad-check] {len(flat_indices)} entries, max relative error {worst:.3e}")
    return worst


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: ModelParams, cfg: ModelConfig, path: str, vocab: Optional[Vocabulary] = None) -> None:
    """
    Layout: magic "DYNATTN1" | version u32 | JSON blob length u64 + blob |
    tensor count u32 | per tensor: name length u16 + UTF-8 name, rank u8,
    dims u64 each, row-major float64 data. All little-endian.
    """
    blob = json.dumps({"config": cfg.to_dict(), "vocab": list(vocab.tokens) if vocab else None},
                      sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<Q", len(blob)), blob,
              struct.pack("<I", len(params.tensors))]
    for name, tensor in params.tensors.items():
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)))
        chunks.append(encoded)
        chunks.append(struct.pack("<B", tensor.ndim))
        chunks.append(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
        chunks.append(np.ascontiguousarray(tensor, dtype="<f8").tobytes())

    tmp_path = f"{path}.tmp"
    with open(tmp_path, "wb") as f:
        f.write(b"".join(chunks))
    os.replace(tmp_path, path)
    logger.info(f"Saved checkpoint with {len(params.tensors)} tensors to {path}")


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise FormatError(f"{self.path}: truncated checkpoint at byte {self.offset}")
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path: str) -> Tuple[ModelParams, ModelConfig, Optional[Vocabulary]]:
    with open(path, "rb") as f:
        reader = _Reader(f.read(), path)

    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic, not a checkpoint")
    (version,) = reader.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    (blob_length,) = reader.unpack("<Q")
    try:
        header = json.loads(reader.take(blob_length).decode("utf-8"))
        cfg = ModelConfig.from_dict(header["config"])
        vocab = Vocabulary.from_tokens(header["vocab"]) if header.get("vocab") else None
    except (ValueError, KeyError, TypeError, AttributeError, ConfigError) as e:
        raise FormatError(f"{path}: unreadable config blob: {e}") from e

    expected = dict(param_shapes(cfg))
    (count,) = reader.unpack("<I")
    tensors: Dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_length,) = reader.unpack("<H")
        name = reader.take(name_length).decode("utf-8")
        (rank,) = reader.unpack("<B")
        dims = reader.unpack(f"<{rank}Q") if rank else ()
        size = int(np.prod(dims)) if dims else 1
        data = np.frombuffer(reader.take(8 * size), dtype="<f8").astype(np.float64).reshape(dims)
        if expected.get(name) != tuple(dims):
            raise FormatError(f"{path}: tensor '{name}' has shape {tuple(dims)}, config expects {expected.get(name)}")
        tensors[name] = data
    if reader.offset != len(reader.data):
        raise FormatError(f"{path}: {len(reader.data) - reader.offset} trailing bytes")
    if set(tensors) != set(expected):
        raise FormatError(f"{path}: missing tensors {sorted(set(expected) - set(tensors))}")
    logger.info(f"Loaded checkpoint {path} ({cfg.task}, {len(tensors)} tensors)")
    return ModelParams(cfg, tensors).freeze(), cfg, vocab
