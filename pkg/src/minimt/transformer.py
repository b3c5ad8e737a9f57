"""Encoder-decoder Transformer on the autodiff core.

Post-norm residual blocks (sublayer -> add -> norm), sinusoidal positions,
scaled dot-product attention with additive mask penalties, and untied
embeddings / output projection. Two architecture presets are shipped:
``word_level_config`` (4+4 layers, 10 heads, width 300) and ``bpe_config``
(6+6 layers, 4 heads, width 256).

Forward functions accept a single id sequence (1-D) or a batch (2-D);
boolean masks mark attendable (non-pad) positions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import Tensor

MASK_PENALTY = -1e9


class ModelError(Exception):
    pass


@dataclass(frozen=True)
class TransformerConfig:
    src_vocab_size: int
    tgt_vocab_size: int
    enc_layers: int = 4
    dec_layers: int = 4
    heads: int = 10
    embed_dim: int = 300
    ff_dim: Optional[int] = None  # defaults to 4 * embed_dim
    dropout: float = 0.1
    max_positions: int = 512

    def __post_init__(self):
        if self.ff_dim is None:
            object.__setattr__(self, "ff_dim", 4 * self.embed_dim)
        if self.embed_dim % self.heads != 0:
            raise ModelError(
                f"embed_dim {self.embed_dim} not divisible by heads {self.heads}")
        if self.embed_dim % 2 != 0:
            raise ModelError(f"embed_dim must be even, got {self.embed_dim}")
        if min(self.src_vocab_size, self.tgt_vocab_size) < 4:
            raise ModelError("vocabulary sizes must include the 4 special tokens")
        if self.enc_layers < 0 or self.dec_layers < 0:
            raise ModelError("layer counts must be >= 0")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.heads


def word_level_config(src_vocab_size: int, tgt_vocab_size: int, **overrides) -> TransformerConfig:
    """Word-level preset: 4 encoder + 4 decoder layers, 10 heads, width 300."""
    cfg = TransformerConfig(src_vocab_size=src_vocab_size, tgt_vocab_size=tgt_vocab_size,
                            enc_layers=4, dec_layers=4, heads=10, embed_dim=300)
    return replace(cfg, **overrides) if overrides else cfg


def bpe_config(src_vocab_size: int, tgt_vocab_size: int, **overrides) -> TransformerConfig:
    """BPE preset: 6 encoder + 6 decoder layers, 4 heads, width 256."""
    cfg = TransformerConfig(src_vocab_size=src_vocab_size, tgt_vocab_size=tgt_vocab_size,
                            enc_layers=6, dec_layers=6, heads=4, embed_dim=256)
    return replace(cfg, **overrides) if overrides else cfg


def parameter_count(config: TransformerConfig) -> int:
    """Closed-form parameter total; asserted against the built model.

    embeddings (V_src + V_tgt) * d
    + enc layers * (4(d^2+d) + 2 d ff + ff + d + 2*2d)
    + dec layers * (8(d^2+d) + 2 d ff + ff + d + 3*2d)
    + output projection d * V_tgt + V_tgt
    """
    d, ff = config.embed_dim, config.ff_dim
    attn = 4 * (d * d + d)
    ffn = 2 * d * ff + ff + d
    norm = 2 * d
    enc = attn + ffn + 2 * norm
    dec = 2 * attn + ffn + 3 * norm
    return ((config.src_vocab_size + config.tgt_vocab_size) * d
            + config.enc_layers * enc + config.dec_layers * dec
            + d * config.tgt_vocab_size + config.tgt_vocab_size)


def sinusoidal_positions(max_len: int, dim: int) -> np.ndarray:
    """Position matrix: (pos, 2i) = sin(pos/10000^(2i/dim)), (pos, 2i+1) = cos."""
    if dim % 2 != 0:
        raise ModelError(f"position encoding needs an even dim, got {dim}")
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i2 = np.arange(0, dim, 2, dtype=np.float64)
    angles = pos / np.power(10000.0, i2 / dim)
    out = np.zeros((max_len, dim), dtype=T.get_default_dtype())
    out[:, 0::2] = np.sin(angles)
    out[:, 1::2] = np.cos(angles)
    return out


# ---------------------------------------------------------------------------
# parameters

def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    data = rng.uniform(-limit, limit, size=(fan_in, fan_out))
    return Tensor(data, requires_grad=True)


def _zeros(n: int) -> Tensor:
    return Tensor(np.zeros(n), requires_grad=True)


def _ones(n: int) -> Tensor:
    return Tensor(np.ones(n), requires_grad=True)


def _attention_params(rng, d):
    return {name: _xavier(rng, d, d) for name in ("wq", "wk", "wv", "wo")} | {
        name: _zeros(d) for name in ("bq", "bk", "bv", "bo")}


def _norm_params(d):
    return {"gain": _ones(d), "bias": _zeros(d)}


def _ff_params(rng, d, ff):
    return {"w1": _xavier(rng, d, ff), "b1": _zeros(ff),
            "w2": _xavier(rng, ff, d), "b2": _zeros(d)}


class TransformerModel:
    """Parameter container; forward passes live in module-level functions."""

    def __init__(self, config: TransformerConfig, params: dict, positions: np.ndarray):
        self.config = config
        self.params = params
        self.positions = positions

    def named_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}

        def walk(prefix, obj):
            if isinstance(obj, Tensor):
                out[prefix] = obj
            elif isinstance(obj, dict):
                for key, val in obj.items():
                    walk(f"{prefix}.{key}" if prefix else key, val)
            elif isinstance(obj, list):
                for idx, val in enumerate(obj):
                    walk(f"{prefix}.{idx}", val)
            else:
                raise ModelError(f"unexpected parameter entry at {prefix}")

        walk("", self.params)
        return out

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def zero_grad(self) -> None:
        for p in self.named_parameters().values():
            p.zero_grad()


def build_model(config: TransformerConfig, seed: int) -> TransformerModel:
    """Xavier-uniform weights, zero biases; deterministic for a seed."""
    d, ff = config.embed_dim, config.ff_dim
    rng = np.random.default_rng(seed)
    params = {
        "src_embed": _xavier(rng, config.src_vocab_size, d),
        "tgt_embed": _xavier(rng, config.tgt_vocab_size, d),
        "enc": [
            {"self_attn": _attention_params(rng, d), "norm1": _norm_params(d),
             "ff": _ff_params(rng, d, ff), "norm2": _norm_params(d)}
            for _ in range(config.enc_layers)
        ],
        "dec": [
            {"self_attn": _attention_params(rng, d), "norm1": _norm_params(d),
             "cross_attn": _attention_params(rng, d), "norm2": _norm_params(d),
             "ff": _ff_params(rng, d, ff), "norm3": _norm_params(d)}
            for _ in range(config.dec_layers)
        ],
        "out_proj": {"w": _xavier(rng, d, config.tgt_vocab_size),
                     "b": _zeros(config.tgt_vocab_size)},
    }
    model = TransformerModel(config, params, sinusoidal_positions(config.max_positions, d))
    actual, expected = model.parameter_count(), parameter_count(config)
    if actual != expected:
        raise ModelError(f"parameter count {actual} != closed form {expected}")
    return model


# ---------------------------------------------------------------------------
# attention

def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, t, d = x.shape
    x = T.reshape(x, (b, t, heads, d // heads))
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (b * heads, t, d // heads))


def _join_heads(x: Tensor, heads: int) -> Tensor:
    bh, t, hd = x.shape
    x = T.reshape(x, (bh // heads, heads, t, hd))
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (bh // heads, t, heads * hd))


def multi_head_attention(queries: Tensor, keys: Tensor, values: Tensor,
                         mask: Optional[np.ndarray], heads: int,
                         out_weight: Optional[Tensor] = None,
                         out_bias: Optional[Tensor] = None,
                         dropout: float = 0.0,
                         rng: Optional[np.random.Generator] = None,
                         train: bool = False) -> Tensor:
    """Scaled dot-product attention over ``heads`` head slices.

    ``mask`` is boolean (batch, n_queries, n_keys); True marks attendable
    positions and a fully masked query row is an error. The concatenated
    heads are projected when ``out_weight`` is given.
    """
    b, tq, d = queries.shape
    tk = keys.shape[1]
    if d % heads != 0:
        raise ModelError(f"model dim {d} not divisible by heads {heads}")
    if keys.shape != (b, tk, d) or values.shape != (b, tk, d):
        raise ModelError(
            f"attention shapes disagree: q={queries.shape} k={keys.shape} v={values.shape}")
    q = _split_heads(queries, heads)
    k = _split_heads(keys, heads)
    v = _split_heads(values, heads)
    scores = T.mul(T.matmul(q, T.swap_last_axes(k)), 1.0 / math.sqrt(d // heads))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (b, tq, tk):
            raise ModelError(f"mask shape {mask.shape} != {(b, tq, tk)}")
        if not mask.any(axis=-1).all():
            raise ModelError("attention query row with no attendable position")
        penalty = np.where(mask, 0.0, MASK_PENALTY)
        penalty = np.broadcast_to(penalty[:, None], (b, heads, tq, tk)).reshape(b * heads, tq, tk)
        scores = T.add(scores, Tensor(penalty))
    weights = T.softmax(scores, axis=-1)
    if train and dropout > 0.0:
        weights = T.dropout(weights, dropout, rng, training=True)
    ctx = _join_heads(T.matmul(weights, v), heads)
    if out_weight is not None:
        ctx = T.matmul(ctx, out_weight)
        if out_bias is not None:
            ctx = T.add_bias(ctx, out_bias)
    return ctx


def _attend(params: dict, q_in: Tensor, kv_in: Tensor, mask, cfg: TransformerConfig,
            train: bool, rng) -> Tensor:
    q = T.add_bias(T.matmul(q_in, params["wq"]), params["bq"])
    k = T.add_bias(T.matmul(kv_in, params["wk"]), params["bk"])
    v = T.add_bias(T.matmul(kv_in, params["wv"]), params["bv"])
    return multi_head_attention(q, k, v, mask, cfg.heads,
                                out_weight=params["wo"], out_bias=params["bo"],
                                dropout=cfg.dropout, rng=rng, train=train)


def _feed_forward(params: dict, x: Tensor) -> Tensor:
    hidden = T.relu(T.add_bias(T.matmul(x, params["w1"]), params["b1"]))
    return T.add_bias(T.matmul(hidden, params["w2"]), params["b2"])


def _sublayer(x: Tensor, out: Tensor, norm: dict, cfg, train, rng) -> Tensor:
    if train and cfg.dropout > 0.0:
        out = T.dropout(out, cfg.dropout, rng, training=True)
    return T.layer_norm(T.add(x, out), norm["gain"], norm["bias"])


def _as_batch(ids) -> tuple[np.ndarray, bool]:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise ModelError(f"ids must be 1-D or 2-D, got shape {arr.shape}")


def _as_mask(mask, shape) -> np.ndarray:
    if mask is None:
        return np.ones(shape, dtype=bool)
    arr = np.asarray(mask, dtype=bool)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.shape != shape:
        raise ModelError(f"mask shape {arr.shape} != ids shape {shape}")
    return arr


def _embed(model: TransformerModel, table: Tensor, ids: np.ndarray,
           train: bool, rng) -> Tensor:
    cfg = model.config
    b, t = ids.shape
    if t > cfg.max_positions:
        raise ModelError(f"sequence length {t} exceeds max_positions {cfg.max_positions}")
    x = T.mul(T.gather_rows(table, ids), math.sqrt(cfg.embed_dim))
    pos = np.broadcast_to(model.positions[:t].astype(x.dtype), (b, t, cfg.embed_dim))
    x = T.add(x, Tensor(pos.copy()))
    if train and cfg.dropout > 0.0:
        x = T.dropout(x, cfg.dropout, rng, training=True)
    return x


def encode_source(model: TransformerModel, src_ids, src_mask=None,
                  train: bool = False, rng: Optional[np.random.Generator] = None) -> Tensor:
    """Run the encoder stack; returns memory of shape (positions, embed_dim)
    for 1-D input, (batch, positions, embed_dim) for 2-D."""
    cfg = model.config
    ids, squeeze = _as_batch(src_ids)
    if ids.size and ids.max() >= cfg.src_vocab_size:
        raise ModelError(f"source id {ids.max()} out of range [0, {cfg.src_vocab_size})")
    mask = _as_mask(src_mask, ids.shape)
    b, s = ids.shape
    attn_mask = np.broadcast_to(mask[:, None, :], (b, s, s))
    x = _embed(model, model.params["src_embed"], ids, train, rng)
    for layer in model.params["enc"]:
        attn = _attend(layer["self_attn"], x, x, attn_mask, cfg, train, rng)
        x = _sublayer(x, attn, layer["norm1"], cfg, train, rng)
        x = _sublayer(x, _feed_forward(layer["ff"], x), layer["norm2"], cfg, train, rng)
    return T.reshape(x, (s, cfg.embed_dim)) if squeeze else x


def causal_mask(t: int) -> np.ndarray:
    return np.tril(np.ones((t, t), dtype=bool))


def decoder_forward(model: TransformerModel, memory: Tensor, tgt_ids,
                    src_mask=None, tgt_mask=None, train: bool = False,
                    rng: Optional[np.random.Generator] = None) -> Tensor:
    """Causally masked decoder + cross-attention; returns raw logits of
    shape (positions, tgt_vocab) for 1-D input, batched otherwise.

    ``tgt_mask``/``src_mask`` mark non-pad positions; the causal triangle
    is always applied on top of ``tgt_mask``.
    """
    cfg = model.config
    ids, squeeze = _as_batch(tgt_ids)
    if ids.size and ids.max() >= cfg.tgt_vocab_size:
        raise ModelError(f"target id {ids.max()} out of range [0, {cfg.tgt_vocab_size})")
    b, t = ids.shape
    if memory.ndim == 2:
        memory = T.reshape(memory, (1,) + memory.shape)
    if memory.shape[0] != b or memory.shape[2] != cfg.embed_dim:
        raise ModelError(f"memory shape {memory.shape} incompatible with batch {b}")
    s = memory.shape[1]
    tmask = _as_mask(tgt_mask, ids.shape)
    smask = _as_mask(src_mask, (b, s))
    self_mask = causal_mask(t)[None, :, :] & tmask[:, None, :]
    cross_mask = np.broadcast_to(smask[:, None, :], (b, t, s))

    x = _embed(model, model.params["tgt_embed"], ids, train, rng)
    for layer in model.params["dec"]:
        attn = _attend(layer["self_attn"], x, x, self_mask, cfg, train, rng)
        x = _sublayer(x, attn, layer["norm1"], cfg, train, rng)
        cross = _attend(layer["cross_attn"], x, memory, cross_mask, cfg, train, rng)
        x = _sublayer(x, cross, layer["norm2"], cfg, train, rng)
        x = _sublayer(x, _feed_forward(layer["ff"], x), layer["norm3"], cfg, train, rng)
    logits = T.add_bias(T.matmul(x, model.params["out_proj"]["w"]), model.params["out_proj"]["b"])
    return T.reshape(logits, (t, cfg.tgt_vocab_size)) if squeeze else logits
