"""Deterministic multi-head self-attention transformer used as the baseline.

The block is post-norm: ``x = LN(x + MHA(x)); x = LN(x + FFN(x))``. The
attention weights are produced by a pluggable ``weights_fn`` so the Bayesian
variant can reuse the whole block and swap only how ``W`` is formed.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

PHI_CLAMP = 30.0
POOLINGS = ("mean", "last", "tokens")
EMBED_STD = 0.5


@dataclass
class AttentionConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 2
    ffn_hidden: int = 128
    vocab_size: int = 16
    max_seq_len: int = 10
    n_classes: int = 16
    pooling: str = "tokens"

    def __post_init__(self):
        for f in fields(self):
            if f.name != "pooling" and not (isinstance(getattr(self, f.name), int) and getattr(self, f.name) > 0):
                raise ValueError(f"AttentionConfig.{f.name} must be a positive integer")
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")

    @property
    def d_k(self):
        return self.d_model // self.n_heads

    def to_dict(self):
        return asdict(self)


@dataclass
class LayerParams:
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor


LAYER_FIELDS = tuple(f.name for f in fields(LayerParams))


def f_dot(q, k, d_k=None):
    """Scaled dot-product logits q k^T / sqrt(d_k), clamped to [-30, 30]."""
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"f_dot: query shape {q.shape} and key shape {k.shape} disagree on d_k")
    d_k = q.shape[-1] if d_k is None else d_k
    logits = T.scale(q @ k.T, 1.0 / math.sqrt(d_k))
    return T.clamp(logits, -PHI_CLAMP, PHI_CLAMP)


def f_norm(s):
    """Normalise positive scores across the key (last) axis."""
    total = s.sum(axis=-1, keepdims=True)
    if np.any(total.data < 1e-300):
        raise FloatingPointError("f_norm: degenerate row (scores sum below 1e-300)")
    return s / total


def softmax_weights(layer_index, phi, keys):
    return T.softmax(phi, axis=-1)


def split_heads(x, n_heads):
    b, n, d = x.shape
    return x.reshape(b, n, n_heads, d // n_heads).transpose(0, 2, 1, 3)


def merge_heads(x):
    b, h, n, dk = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, n, h * dk)


def self_attention(x, layer, n_heads, weights_fn=softmax_weights, layer_index=0):
    """Multi-head attention output (after the output projection) and the weights.

    ``x`` is [batch, seq, d_model] or [seq, d_model].
    """
    squeeze = x.ndim == 2
    if squeeze:
        x = x.reshape(1, *x.shape)
    q = split_heads(x @ layer.wq + layer.bq, n_heads)
    k = split_heads(x @ layer.wk + layer.bk, n_heads)
    v = split_heads(x @ layer.wv + layer.bv, n_heads)
    phi = f_dot(q, k)
    w = weights_fn(layer_index, phi, k)
    out = merge_heads(w @ v) @ layer.wo + layer.bo
    if squeeze:
        out = out.reshape(out.shape[1:])
    return out, w


def transformer_block(x, layer, n_heads, weights_fn=softmax_weights, layer_index=0):
    attn, _ = self_attention(x, layer, n_heads, weights_fn, layer_index)
    x = T.layer_norm(x + attn, layer.ln1_g, layer.ln1_b)
    ff = T.relu(x @ layer.w1 + layer.b1) @ layer.w2 + layer.b2
    return T.layer_norm(x + ff, layer.ln2_g, layer.ln2_b)


def deterministic_attention(x, layer, n_heads):
    """One full deterministic block: softmax attention, residuals, FFN, layer norms."""
    return transformer_block(x, layer, n_heads)


def init_base_params(cfg, rng):
    """Fresh parameters: N(0, 1/fan_in) weights, zero biases, unit LN gains.

    Embeddings start at std 0.5 so first-layer logits are O(1), like the
    logits of later layers that see layer-normed inputs.
    """
    def lin(fan_in, fan_out):
        return rng.normal((fan_in, fan_out), scale=1.0 / math.sqrt(fan_in))

    d, f = cfg.d_model, cfg.ffn_hidden
    p = {
        "embed.tok": rng.normal((cfg.vocab_size, d), scale=EMBED_STD),
        "embed.pos": rng.normal((cfg.max_seq_len, d), scale=EMBED_STD),
    }
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        for name in ("wq", "wk", "wv", "wo"):
            p[pre + name] = lin(d, d)
            p[pre + "b" + name[1]] = np.zeros(d)
        p[pre + "w1"] = lin(d, f)
        p[pre + "b1"] = np.zeros(f)
        p[pre + "w2"] = lin(f, d)
        p[pre + "b2"] = np.zeros(d)
        for ln in ("ln1", "ln2"):
            p[pre + ln + "_g"] = np.ones(d)
            p[pre + ln + "_b"] = np.zeros(d)
    p["head.w"] = lin(d, cfg.n_classes)
    p["head.b"] = np.zeros(cfg.n_classes)
    return p


def base_param_shapes(cfg):
    d, f = cfg.d_model, cfg.ffn_hidden
    shapes = {"embed.tok": (cfg.vocab_size, d), "embed.pos": (cfg.max_seq_len, d)}
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        for name in ("wq", "wk", "wv", "wo"):
            shapes[pre + name] = (d, d)
            shapes[pre + "b" + name[1]] = (d,)
        shapes.update({pre + "w1": (d, f), pre + "b1": (f,), pre + "w2": (f, d), pre + "b2": (d,)})
        for ln in ("ln1", "ln2"):
            shapes[pre + ln + "_g"] = (d,)
            shapes[pre + ln + "_b"] = (d,)
    shapes["head.w"] = (d, cfg.n_classes)
    shapes["head.b"] = (cfg.n_classes,)
    return shapes


class AttentionModel:
    """Token embedding, a stack of deterministic blocks and a linear head."""

    format_tag = "det-attn"

    def __init__(self, config, params=None, rng=None):
        self.config = config
        if params is None:
            if rng is None:
                raise ValueError("need either params or an rng to initialise them")
            params = init_base_params(config, rng)
        self.params = {name: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=name)
                       for name, v in params.items()}
        self._check_shapes()

    def expected_shapes(self):
        return base_param_shapes(self.config)

    def _check_shapes(self):
        expected = self.expected_shapes()
        missing = sorted(set(expected) - set(self.params))
        extra = sorted(set(self.params) - set(expected))
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.params[name].shape != tuple(shape):
                raise ShapeError(f"{name}: expected shape {tuple(shape)}, got {self.params[name].shape}")

    def parameters(self):
        return list(self.params.values())

    def layer(self, l):
        pre = f"layers.{l}."
        return LayerParams(**{f: self.params[pre + f] for f in LAYER_FIELDS})

    def embed(self, tokens, feature_noise=None):
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None, :]
        n = tokens.shape[1]
        if n > self.config.max_seq_len:
            raise ValueError(f"sequence length {n} exceeds max_seq_len={self.config.max_seq_len}")
        x = T.embedding(self.params["embed.tok"], tokens) + self.params["embed.pos"][:n]
        if feature_noise is not None:
            x = x + Tensor(feature_noise)
        return x

    def classifier_head(self, features):
        pooling = self.config.pooling
        if pooling == "mean":
            features = features.mean(axis=1)
        elif pooling == "last":
            features = features[:, -1, :]
        return features @ self.params["head.w"] + self.params["head.b"]

    def features(self, tokens, feature_noise=None, weights_fn=softmax_weights):
        x = self.embed(tokens, feature_noise)
        for l in range(self.config.n_layers):
            x = transformer_block(x, self.layer(l), self.config.n_heads, weights_fn, l)
        return x

    def forward(self, tokens, feature_noise=None):
        return self.classifier_head(self.features(tokens, feature_noise))

    def predict_proba(self, tokens, feature_noise=None):
        with T.no_grad():
            return T.softmax(self.forward(tokens, feature_noise), -1).data

    def state(self):
        return {name: t.data.copy() for name, t in self.params.items()}
