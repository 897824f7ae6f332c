"""Minimal decoder-only transformer with a KV cache and dual-precision linears.

Architecture: pre-norm residual blocks of causal multi-head attention and a
gated MLP, rotary position embedding on queries and keys, RMS normalization,
and a token embedding tied to the output head.  All arithmetic is float32
(the working precision).  Each of the seven projection matrices per layer
can run either as a plain float32 matmul (high precision) or through the
4-bit quantized path: the weight uses a cached quantized shadow copy and
each activation row is quantized on the fly as its own tensor (per-token
scale, 16-element blocks along the feature axis), so a token's codes never
depend on what else shares the batch.  Norms, rotary embedding, softmax,
residuals and the output head stay in float32 in every mode.

Weight initialization is fully pinned (see ``rng``): a single normal stream
seeded from the config seed is consumed in this order, each matrix row-major
in its stored [out, in] layout:

    token embedding [vocab, d_model], then per layer:
    attn_q, attn_k, attn_v, attn_out  [d_model, d_model]
    mlp_gate, mlp_up  [ffn_hidden, d_model], mlp_down  [d_model, ffn_hidden]

scaled by 0.02 and cast to float32.  Norm gains initialize to one and draw
nothing.

Weight file layout (all little-endian): magic ``MXQW``, version u32, config
digest u64, the config block (vocab_size, d_model, n_layers, n_heads,
head_dim, ffn_hidden, max_seq_len as u32; rope_base f64; seed u64), then
every tensor as float32 row-major in the order listed above with the two
norm gains of each layer preceding their sublayer and the final norm gain
last.  The digest is FNV-1a 64 over the config block and is echoed in cache
transfer blobs.
"""

from __future__ import annotations

import contextlib
import math
import struct
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from .errors import ConfigError, ContextOverflowError
from .quantizer import (
    QuantConfig,
    QuantizedTensor,
    TensorScalePolicy,
    quantize,
    quantize_rows,
)
from .gemm import qgemm_rows
from .rng import normal_stream

RMSNORM_EPS = np.float32(1e-6)
WEIGHT_FILE_MAGIC = b"MXQW"
WEIGHT_FILE_VERSION = 1

_ACTIVATION_QUANT = QuantConfig(policy=TensorScalePolicy.AMAX_CALIBRATED)
_WEIGHT_QUANT = QuantConfig(policy=TensorScalePolicy.AMAX_CALIBRATED)


class Precision(Enum):
    HIGH = "high"
    NVFP4 = "nvfp4"


_identity_quantizer_active = False


@contextlib.contextmanager
def identity_quantizer():
    """Test hook: run the quantized path as exact float32 matmuls."""
    global _identity_quantizer_active
    prev = _identity_quantizer_active
    _identity_quantizer_active = True
    try:
        yield
    finally:
        _identity_quantizer_active = prev


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    d_model: int
    n_layers: int
    n_heads: int
    max_seq_len: int
    seed: int
    head_dim: int = 0
    ffn_hidden: int = 0
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.head_dim == 0:
            if self.d_model % self.n_heads != 0:
                raise ConfigError("d_model must be divisible by n_heads")
            object.__setattr__(self, "head_dim", self.d_model // self.n_heads)
        if self.ffn_hidden == 0:
            object.__setattr__(self, "ffn_hidden", 4 * self.d_model)
        self.validate()

    def validate(self):
        if self.vocab_size < 1 or self.n_layers < 1 or self.n_heads < 1:
            raise ConfigError("vocab_size, n_layers, n_heads must be positive")
        if self.max_seq_len < 1:
            raise ConfigError("max_seq_len must be positive")
        for name in ("d_model", "head_dim", "ffn_hidden"):
            if getattr(self, name) % 16 != 0:
                raise ConfigError(f"{name} must be divisible by 16")
        if self.n_heads * self.head_dim != self.d_model:
            raise ConfigError("n_heads * head_dim must equal d_model")
        if not (self.rope_base > 0 and math.isfinite(self.rope_base)):
            raise ConfigError("rope_base must be positive and finite")

    def config_block(self) -> bytes:
        return struct.pack(
            "<IIIIIII d Q",
            self.vocab_size,
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.head_dim,
            self.ffn_hidden,
            self.max_seq_len,
            self.rope_base,
            self.seed & 0xFFFFFFFFFFFFFFFF,
        )

    def digest(self) -> int:
        return fnv1a64(self.config_block())

    @classmethod
    def from_config_block(cls, block: bytes) -> "ModelConfig":
        vocab, d, nl, nh, hd, ffn, msl, rope, seed = struct.unpack("<IIIIIII d Q", block)
        return cls(
            vocab_size=vocab,
            d_model=d,
            n_layers=nl,
            n_heads=nh,
            head_dim=hd,
            ffn_hidden=ffn,
            max_seq_len=msl,
            rope_base=rope,
            seed=seed,
        )


_CONFIG_BLOCK_SIZE = struct.calcsize("<IIIIIII d Q")


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


@dataclass
class LayerWeights:
    attn_norm_gain: np.ndarray
    attn_q: np.ndarray
    attn_k: np.ndarray
    attn_v: np.ndarray
    attn_out: np.ndarray
    mlp_norm_gain: np.ndarray
    mlp_gate: np.ndarray
    mlp_up: np.ndarray
    mlp_down: np.ndarray


# (field on LayerWeights, consumes normals) in stream and file order
_LAYER_MATRICES = (
    "attn_q",
    "attn_k",
    "attn_v",
    "attn_out",
    "mlp_gate",
    "mlp_up",
    "mlp_down",
)


class ModelWeights:
    """Immutable-after-construction weights plus lazily built 4-bit shadows."""

    def __init__(self, config: ModelConfig, embedding: np.ndarray,
                 layers: list, final_norm_gain: np.ndarray):
        self.config = config
        self.embedding = embedding
        self.layers = layers
        self.final_norm_gain = final_norm_gain
        self._shadows: dict = {}
        self._shadow_lock = threading.Lock()

    def digest(self) -> int:
        return self.config.digest()

    def shadow(self, layer_idx: int, name: str) -> QuantizedTensor:
        """Quantized copy of one projection matrix, built once and cached."""
        key = (layer_idx, name)
        with self._shadow_lock:
            qt = self._shadows.get(key)
            if qt is None:
                qt = quantize(getattr(self.layers[layer_idx], name), _WEIGHT_QUANT)
                self._shadows[key] = qt
            return qt

    def drop_shadows(self):
        with self._shadow_lock:
            self._shadows.clear()


def init_model(config: ModelConfig) -> ModelWeights:
    """Deterministic weights from the config seed (see module docstring)."""
    cfg = config
    d, f, v = cfg.d_model, cfg.ffn_hidden, cfg.vocab_size
    per_layer = 4 * d * d + 3 * d * f
    total = v * d + cfg.n_layers * per_layer
    stream = (0.02 * normal_stream(cfg.seed, total)).astype(np.float32)

    pos = 0

    def take(rows, cols):
        nonlocal pos
        out = stream[pos : pos + rows * cols].reshape(rows, cols)
        pos += rows * cols
        return out

    embedding = take(v, d)
    layers = []
    for _ in range(cfg.n_layers):
        layers.append(
            LayerWeights(
                attn_norm_gain=np.ones(d, dtype=np.float32),
                attn_q=take(d, d),
                attn_k=take(d, d),
                attn_v=take(d, d),
                attn_out=take(d, d),
                mlp_norm_gain=np.ones(d, dtype=np.float32),
                mlp_gate=take(f, d),
                mlp_up=take(f, d),
                mlp_down=take(d, f),
            )
        )
    final_gain = np.ones(d, dtype=np.float32)
    return ModelWeights(cfg, embedding, layers, final_gain)


class KvCache:
    """Per-layer key/value tensors in float32, single writer per sequence."""

    def __init__(self, config: ModelConfig):
        self.config = config
        shape = (config.max_seq_len, config.n_heads, config.head_dim)
        self.keys = [np.zeros(shape, dtype=np.float32) for _ in range(config.n_layers)]
        self.values = [np.zeros(shape, dtype=np.float32) for _ in range(config.n_layers)]
        self.length = 0

    def copy(self) -> "KvCache":
        dup = KvCache(self.config)
        for i in range(self.config.n_layers):
            dup.keys[i][: self.length] = self.keys[i][: self.length]
            dup.values[i][: self.length] = self.values[i][: self.length]
        dup.length = self.length
        return dup


@dataclass
class AttentionRecord:
    """Post-softmax attention rows for one query position.

    ``rows`` is [n_layers, n_heads, seq_len]; each row sums to one.
    """

    query_position: int
    rows: np.ndarray


@dataclass
class PrefillResult:
    kv: KvCache
    logits: np.ndarray
    attention: Optional[AttentionRecord] = None
    all_logits: Optional[np.ndarray] = None


def _rmsnorm(x: np.ndarray, gain: np.ndarray) -> np.ndarray:
    ms = np.mean(x * x, axis=-1, keepdims=True)
    return x * (np.float32(1.0) / np.sqrt(ms + RMSNORM_EPS)) * gain


def _rope_tables(cfg: ModelConfig, positions: np.ndarray):
    half = cfg.head_dim // 2
    inv_freq = cfg.rope_base ** (-np.arange(half, dtype=np.float64) * 2.0 / cfg.head_dim)
    ang = positions[:, None].astype(np.float64) * inv_freq[None, :]
    cos = np.concatenate([np.cos(ang), np.cos(ang)], axis=1).astype(np.float32)
    sin = np.concatenate([np.sin(ang), np.sin(ang)], axis=1).astype(np.float32)
    return cos, sin


def _apply_rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    # x: [P, H, Dh]; pairs (i, i + Dh/2) rotate together.
    half = x.shape[-1] // 2
    rotated = np.concatenate([-x[..., half:], x[..., :half]], axis=-1)
    return x * cos[:, None, :] + rotated * sin[:, None, :]


def _linear(x: np.ndarray, weight: np.ndarray, precision: Precision,
            weights: ModelWeights, layer_idx: int, name: str) -> np.ndarray:
    if precision is Precision.HIGH or _identity_quantizer_active:
        return x @ weight.T
    act = quantize_rows(x, _ACTIVATION_QUANT)
    return qgemm_rows(act, weights.shadow(layer_idx, name))


def forward_block(
    weights: ModelWeights,
    layer_idx: int,
    x: np.ndarray,
    kv: KvCache,
    positions: np.ndarray,
    precision: Precision,
    attn_record_row: Optional[np.ndarray] = None,
) -> np.ndarray:
    """One pre-norm residual block over a chunk of hidden states.

    ``positions`` must continue the cache: they start at ``kv.length``
    (which only advances once the caller has run every layer, so all layers
    of one chunk see the same start).  Writes this layer's K/V at those
    positions; reads keys up to the chunk end with a causal mask.  If
    ``attn_record_row`` is given (shape [n_heads, q+1] for query position q
    inside the chunk) the post-softmax rows are stored into it.
    """
    cfg = weights.config
    layer = weights.layers[layer_idx]
    p = x.shape[0]
    pos0 = int(positions[0])
    total = pos0 + p
    if pos0 != kv.length:
        raise ValueError(
            f"positions start at {pos0} but the cache holds {kv.length} entries"
        )
    if not np.array_equal(positions, np.arange(pos0, total)):
        raise ValueError("positions must be contiguous")
    if total > cfg.max_seq_len:
        raise ContextOverflowError(
            f"position {total - 1} exceeds max_seq_len {cfg.max_seq_len}",
            position=total - 1,
        )
    cos, sin = _rope_tables(cfg, positions)
    scale = np.float32(1.0 / math.sqrt(cfg.head_dim))

    h = _rmsnorm(x, layer.attn_norm_gain)
    q = _linear(h, layer.attn_q, precision, weights, layer_idx, "attn_q")
    k = _linear(h, layer.attn_k, precision, weights, layer_idx, "attn_k")
    v = _linear(h, layer.attn_v, precision, weights, layer_idx, "attn_v")
    q = _apply_rope(q.reshape(p, cfg.n_heads, cfg.head_dim), cos, sin)
    k = _apply_rope(k.reshape(p, cfg.n_heads, cfg.head_dim), cos, sin)
    v = v.reshape(p, cfg.n_heads, cfg.head_dim)

    kv.keys[layer_idx][pos0:total] = k
    kv.values[layer_idx][pos0:total] = v
    keys = kv.keys[layer_idx][:total]
    vals = kv.values[layer_idx][:total]

    allowed = np.arange(total)[None, :] <= positions[:, None]
    attn_out = np.empty((p, cfg.n_heads, cfg.head_dim), dtype=np.float32)
    for hidx in range(cfg.n_heads):
        scores = (q[:, hidx, :] @ keys[:, hidx, :].T) * scale
        scores = np.where(allowed, scores, np.float32(-np.inf))
        scores = scores - scores.max(axis=-1, keepdims=True)
        e = np.exp(scores)
        probs = e / e.sum(axis=-1, keepdims=True)
        attn_out[:, hidx, :] = probs @ vals[:, hidx, :]
        if attn_record_row is not None:
            qlen = attn_record_row.shape[-1]
            attn_record_row[hidx] = probs[qlen - 1 - pos0, :qlen]
    proj = _linear(
        attn_out.reshape(p, cfg.d_model), layer.attn_out, precision, weights,
        layer_idx, "attn_out",
    )
    x = x + proj

    h = _rmsnorm(x, layer.mlp_norm_gain)
    gate = _linear(h, layer.mlp_gate, precision, weights, layer_idx, "mlp_gate")
    up = _linear(h, layer.mlp_up, precision, weights, layer_idx, "mlp_up")
    act = gate * (np.float32(1.0) / (np.float32(1.0) + np.exp(-gate))) * up
    down = _linear(act, layer.mlp_down, precision, weights, layer_idx,
                   "mlp_down")
    return x + down


def _forward_chunk(
    weights: ModelWeights,
    tokens: np.ndarray,
    kv: KvCache,
    precision: Precision,
    attn_query_position: Optional[int] = None,
) -> tuple:
    """Run ``tokens`` as the next positions after ``kv.length``.

    Writes the new KV entries and advances ``kv.length``.  Returns the
    residual-stream hidden states of the chunk (pre final norm) and the
    recorded attention rows, if a query position was given.
    """
    cfg = weights.config
    p = len(tokens)
    pos0 = kv.length
    if p == 0:
        raise ValueError("empty token chunk")
    if pos0 + p > cfg.max_seq_len:
        raise ContextOverflowError(
            f"position {pos0 + p - 1} exceeds max_seq_len {cfg.max_seq_len}",
            position=pos0 + p - 1,
        )
    positions = np.arange(pos0, pos0 + p)
    total = pos0 + p

    record_rows = None
    if attn_query_position is not None:
        if not (pos0 <= attn_query_position < total):
            raise ValueError("attention query position outside this chunk")
        record_rows = np.zeros(
            (cfg.n_layers, cfg.n_heads, attn_query_position + 1), dtype=np.float32
        )

    x = weights.embedding[tokens]
    for li in range(cfg.n_layers):
        row = record_rows[li] if record_rows is not None else None
        x = forward_block(weights, li, x, kv, positions, precision, row)

    kv.length = total
    record = None
    if record_rows is not None:
        record = AttentionRecord(query_position=attn_query_position, rows=record_rows)
    return x, record


def _logits(weights: ModelWeights, hidden: np.ndarray) -> np.ndarray:
    final = _rmsnorm(hidden, weights.final_norm_gain)
    return final @ weights.embedding.T


def prefill(
    weights: ModelWeights,
    tokens,
    precision: Precision,
    kv: Optional[KvCache] = None,
    record_attention: bool = False,
    return_all_logits: bool = False,
) -> PrefillResult:
    """Causal pass over a prompt (or appended prompt chunk).

    Writes float32 KV entries regardless of precision and returns the
    logits at the final processed position.  ``record_attention`` captures
    the post-softmax rows of the final position in every layer and head.
    """
    toks = np.asarray(tokens, dtype=np.int64)
    if toks.ndim != 1 or toks.size == 0:
        raise ValueError("prompt must be a non-empty 1-D token sequence")
    if toks.min() < 0 or toks.max() >= weights.config.vocab_size:
        raise ValueError("token id outside vocabulary")
    if kv is None:
        kv = KvCache(weights.config)
    qpos = kv.length + toks.size - 1 if record_attention else None
    hidden, record = _forward_chunk(weights, toks, kv, precision, qpos)
    logits_all = _logits(weights, hidden)
    return PrefillResult(
        kv=kv,
        logits=logits_all[-1],
        attention=record,
        all_logits=logits_all if return_all_logits else None,
    )


def decode_step(
    weights: ModelWeights, kv: KvCache, token: int, precision: Precision
) -> np.ndarray:
    """Single-position forward appending one KV entry; returns logits."""
    if not (0 <= token < weights.config.vocab_size):
        raise ValueError("token id outside vocabulary")
    hidden, _ = _forward_chunk(
        weights, np.asarray([token], dtype=np.int64), kv, precision
    )
    return _logits(weights, hidden)[0]


def full_forward_logits(
    weights: ModelWeights, tokens, precision: Precision
) -> np.ndarray:
    """One-shot pass over a whole sequence; logits at every position."""
    result = prefill(weights, tokens, precision, return_all_logits=True)
    return result.all_logits


def save_model(weights: ModelWeights, path: str):
    cfg = weights.config
    block = cfg.config_block()
    with open(path, "wb") as fh:
        fh.write(WEIGHT_FILE_MAGIC)
        fh.write(struct.pack("<I", WEIGHT_FILE_VERSION))
        fh.write(struct.pack("<Q", cfg.digest()))
        fh.write(block)
        fh.write(weights.embedding.astype("<f4").tobytes())
        for layer in weights.layers:
            fh.write(layer.attn_norm_gain.astype("<f4").tobytes())
            for name in ("attn_q", "attn_k", "attn_v", "attn_out"):
                fh.write(getattr(layer, name).astype("<f4").tobytes())
            fh.write(layer.mlp_norm_gain.astype("<f4").tobytes())
            for name in ("mlp_gate", "mlp_up", "mlp_down"):
                fh.write(getattr(layer, name).astype("<f4").tobytes())
        fh.write(weights.final_norm_gain.astype("<f4").tobytes())


def load_model(path: str) -> ModelWeights:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != WEIGHT_FILE_MAGIC:
        raise ValueError("not a model weight file")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != WEIGHT_FILE_VERSION:
        raise ValueError(f"unsupported weight file version {version}")
    (stored_digest,) = struct.unpack_from("<Q", data, 8)
    block = data[16 : 16 + _CONFIG_BLOCK_SIZE]
    cfg = ModelConfig.from_config_block(block)
    if cfg.digest() != stored_digest:
        raise ValueError("config digest mismatch in weight file")

    off = 16 + _CONFIG_BLOCK_SIZE

    def take(rows, cols=None):
        nonlocal off
        count = rows if cols is None else rows * cols
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(
            np.float32
        )
        off += 4 * count
        return arr if cols is None else arr.reshape(rows, cols)

    d, f = cfg.d_model, cfg.ffn_hidden
    embedding = take(cfg.vocab_size, d)
    layers = []
    for _ in range(cfg.n_layers):
        layers.append(
            LayerWeights(
                attn_norm_gain=take(d),
                attn_q=take(d, d),
                attn_k=take(d, d),
                attn_v=take(d, d),
                attn_out=take(d, d),
                mlp_norm_gain=take(d),
                mlp_gate=take(f, d),
                mlp_up=take(f, d),
                mlp_down=take(d, f),
            )
        )
    final_gain = take(d)
    if off != len(data):
        raise ValueError("trailing bytes in weight file")
    return ModelWeights(cfg, embedding, layers, final_gain)
