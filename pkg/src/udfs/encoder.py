"""Transformer encoder mapping a UDFS batch to one embedding per trace.

Pipeline: linear 2 -> d_model projection, sinusoidal positions on the flow
rows, a learnable [CLS] row prepended (no position), ``n_layers`` pre-norm
encoder layers, and the [CLS] output as the trace embedding.
"""
from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import engine as E
from .engine import Rng, Tensor
from .errors import NonFiniteActivation, OddModelDim, ShapeMismatch
from .representation import SequenceBatch, UdfsSequence, batch_sequences

MASK_BIAS = -1e9


@dataclass(frozen=True)
class EncoderConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    d_ff: int = 256
    dropout: float = 0.1
    n_max: int = 256

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1:
            raise ValueError("n_layers must be >= 1")
        if self.d_ff < self.d_model:
            raise ValueError("d_ff must be >= d_model")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")
        if self.d_model % 2:
            raise OddModelDim(f"d_model must be even, got {self.d_model}")

    def to_dict(self) -> dict:
        return asdict(self)


def positional_encoding(n_positions: int, d_model: int) -> np.ndarray:
    """Sinusoidal table: sin on even columns, cos on odd, wavelength base 10000."""
    if d_model % 2:
        raise OddModelDim(f"d_model must be even, got {d_model}")
    pos = np.arange(n_positions, dtype=np.float64)[:, None]
    freq = 10000.0 ** (-np.arange(0, d_model, 2, dtype=np.float64) / d_model)
    pe = np.zeros((n_positions, d_model))
    pe[:, 0::2] = np.sin(pos * freq)
    pe[:, 1::2] = np.cos(pos * freq)
    return pe


@lru_cache(maxsize=8)
def _pe32(n_positions: int, d_model: int) -> np.ndarray:
    return positional_encoding(n_positions, d_model).astype(np.float32)


def init_params(config: EncoderConfig, rng: Rng) -> "OrderedDict[str, Tensor]":
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, unit LayerNorm gains, N(0, 0.02) [CLS]."""
    d, f = config.d_model, config.d_ff
    params: "OrderedDict[str, Tensor]" = OrderedDict()

    def uniform(name, fan_in, shape):
        bound = 1.0 / math.sqrt(fan_in)
        params[name] = Tensor(rng.uniform(-bound, bound, shape).astype(np.float32), requires_grad=True, name=name)

    def const(name, shape, value):
        params[name] = Tensor(np.full(shape, value, dtype=np.float32), requires_grad=True, name=name)

    uniform("input_proj.weight", 2, (2, d))
    const("input_proj.bias", (d,), 0.0)
    params["cls_token"] = Tensor(
        rng.normal(0.0, 0.02, (1, d)).astype(np.float32), requires_grad=True, name="cls_token"
    )
    for i in range(config.n_layers):
        p = f"layers.{i}."
        const(p + "ln1.gain", (d,), 1.0)
        const(p + "ln1.bias", (d,), 0.0)
        uniform(p + "attn.qkv.weight", d, (d, 3 * d))
        const(p + "attn.qkv.bias", (3 * d,), 0.0)
        uniform(p + "attn.out.weight", d, (d, d))
        const(p + "attn.out.bias", (d,), 0.0)
        const(p + "ln2.gain", (d,), 1.0)
        const(p + "ln2.bias", (d,), 0.0)
        uniform(p + "ffn.w1", d, (d, f))
        const(p + "ffn.b1", (f,), 0.0)
        uniform(p + "ffn.w2", f, (f, d))
        const(p + "ffn.b2", (d,), 0.0)
    return params


def param_shapes(config: EncoderConfig) -> "OrderedDict[str, tuple]":
    d, f = config.d_model, config.d_ff
    shapes = OrderedDict([("input_proj.weight", (2, d)), ("input_proj.bias", (d,)), ("cls_token", (1, d))])
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes.update(
            [
                (p + "ln1.gain", (d,)),
                (p + "ln1.bias", (d,)),
                (p + "attn.qkv.weight", (d, 3 * d)),
                (p + "attn.qkv.bias", (3 * d,)),
                (p + "attn.out.weight", (d, d)),
                (p + "attn.out.bias", (d,)),
                (p + "ln2.gain", (d,)),
                (p + "ln2.bias", (d,)),
                (p + "ffn.w1", (d, f)),
                (p + "ffn.b1", (f,)),
                (p + "ffn.w2", (f, d)),
                (p + "ffn.b2", (d,)),
            ]
        )
    return shapes


def _affine_norm(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    return E.layer_norm(x, axis=-1, eps=1e-5) * gain + bias


def _self_attention(x: Tensor, pad: np.ndarray, params, prefix: str, n_heads: int) -> Tensor:
    b, t, d = x.shape
    dh = d // n_heads
    qkv = x @ params[prefix + "attn.qkv.weight"] + params[prefix + "attn.qkv.bias"]
    qkv = qkv.reshape(b, t, 3, n_heads, dh).transpose(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh))
    # -1e9 swamps any score in float32, so fill and additive bias coincide
    scores = E.masked_fill(scores, pad[:, None, None, :], MASK_BIAS)
    ctx = E.softmax(scores, axis=-1) @ v
    ctx = ctx.transpose(0, 2, 1, 3).reshape(b, t, d)
    return ctx @ params[prefix + "attn.out.weight"] + params[prefix + "attn.out.bias"]


def _feed_forward(x: Tensor, params, prefix: str) -> Tensor:
    h = E.relu(x @ params[prefix + "ffn.w1"] + params[prefix + "ffn.b1"])
    return h @ params[prefix + "ffn.w2"] + params[prefix + "ffn.b2"]


def encode(
    batch: SequenceBatch,
    params,
    config: EncoderConfig,
    training: bool = False,
    rng: Rng | None = None,
    trim: bool = True,
) -> Tensor:
    """Return the (B, d_model) [CLS] embeddings of ``batch``.

    With ``trim`` the batch is cut to its longest true length first; padded
    keys are masked out of attention, so this only saves work.
    """
    if batch.n_max > config.n_max:
        raise ShapeMismatch(f"batch n_max {batch.n_max} exceeds encoder capacity {config.n_max}")
    if batch.values.ndim != 3 or batch.values.shape[2] != 2:
        raise ShapeMismatch(f"batch values must be (B, N, 2), got {batch.values.shape}")
    if training and config.dropout > 0 and rng is None:
        raise ValueError("training with dropout needs an rng")
    values, mask = batch.values, batch.mask
    if trim:
        length = max(int(mask.sum(axis=1).max()), 1)
        values, mask = values[:, :length], mask[:, :length]
    b, n, _ = values.shape
    d = config.d_model

    x = Tensor(values.astype(np.float32)) @ params["input_proj.weight"] + params["input_proj.bias"]
    x = x + Tensor(_pe32(n, d))
    cls = E.embedding_lookup(params["cls_token"], np.zeros((b, 1), dtype=np.int64))
    x = E.concat([cls, x], axis=1)
    pad = np.concatenate([np.zeros((b, 1), dtype=bool), ~mask], axis=1)

    for i in range(config.n_layers):
        p = f"layers.{i}."
        h = _affine_norm(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
        h = _self_attention(h, pad, params, p, config.n_heads)
        x = x + E.dropout(h, config.dropout, rng, training)
        h = _affine_norm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
        h = _feed_forward(h, params, p)
        x = x + E.dropout(h, config.dropout, rng, training)

    out = x[:, 0, :]
    if not np.all(np.isfinite(out.data)):
        raise NonFiniteActivation("non-finite encoder output")
    return out


def embed(
    seqs: list[UdfsSequence],
    params,
    config: EncoderConfig,
    chunk_size: int = 256,
    workers: int = 1,
) -> np.ndarray:
    """Inference-mode embeddings for a list of sequences, shape (len(seqs), d_model).

    Chunks are fixed by ``chunk_size`` so results do not depend on ``workers``.
    """
    if not seqs:
        return np.zeros((0, config.d_model), dtype=np.float32)
    chunks = [seqs[i : i + chunk_size] for i in range(0, len(seqs), chunk_size)]

    def run(chunk):
        with E.no_grad():
            return encode(batch_sequences(chunk), params, config, training=False).data

    if workers > 1 and len(chunks) > 1:
        from concurrent.futures import ThreadPoolExecutor

        # no_grad flips a module global; keep it set for the whole pool.
        with E.no_grad(), ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(run, chunks))
    else:
        outs = [run(c) for c in chunks]
    return np.concatenate(outs, axis=0)
