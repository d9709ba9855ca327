"""Bayesian attention belief network layers on top of the deterministic transformer.

Unnormalised attention weights S get a gamma prior whose shape comes from a
small MLP on the keys, and a Weibull variational posterior whose shape and
scale combine an upward path ``h`` (computed once from the first layer's
logits) with ``exp(phi)`` from the current layer. Weights are normalised
as ``W = S / sum_j S = softmax(log S)``; working with ``log S`` keeps very
peaked Weibulls from overflowing.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import randvar as R
from . import tensor as T
from .attention import AttentionModel, base_param_shapes, init_base_params
from .tensor import Tensor

MODES = ("sample", "posterior_mean")
K_FLOOR = 1e-4
ALPHA_FLOOR = 1e-10
NEW_WEIGHT_STD = 0.02
ENCODER_BIAS_INIT = -3.0


@dataclass
class BabnConstants:
    rho: float = 1.5
    sigma: float = 1e-6
    beta: float = 1.0

    def __post_init__(self):
        if self.rho < 0 or self.sigma < 0:
            raise ValueError(f"rho and sigma must be nonnegative, got rho={self.rho}, sigma={self.sigma}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")


@dataclass
class LayerTrace:
    phi: np.ndarray
    alpha: np.ndarray
    k: np.ndarray
    lam: np.ndarray
    s: np.ndarray
    w: np.ndarray
    h: np.ndarray
    kl: float


@dataclass
class ForwardTrace:
    mode: str
    layers: list = field(default_factory=list)
    h_top: np.ndarray = None


@dataclass
class ForwardOutput:
    logits: Tensor
    kl: list
    trace: ForwardTrace = None
    kl_entries: int = 1  # attention entries per example in one layer

    @property
    def total_kl(self):
        total = self.kl[0]
        for term in self.kl[1:]:
            total = total + term
        return total


def babn_param_shapes(cfg):
    dk, n, h = cfg.d_k, cfg.max_seq_len, cfg.n_heads
    shapes = {}
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        shapes.update({
            pre + "prior.w1": (dk, dk), pre + "prior.b1": (dk,),
            pre + "prior.w2": (dk, 1), pre + "prior.b2": (1,),
        })
        for i in (1, 2, 3):
            shapes[pre + f"enc.w{i}"] = (h, n, n)
            shapes[pre + f"enc.b{i}"] = (h, 1, n)
    return shapes


def init_babn_params(cfg, rng):
    """New prior/encoder weights ~ N(0, 0.02^2); encoder biases -3, prior biases 0."""
    p = {}
    for name, shape in babn_param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[1]
        if leaf.startswith("w"):
            p[name] = rng.normal(shape, scale=NEW_WEIGHT_STD)
        elif ".enc." in name:
            p[name] = np.full(shape, ENCODER_BIAS_INIT)
        else:
            p[name] = np.zeros(shape)
    return p


def prior_alpha(keys, w1, b1, w2, b2):
    """Gamma shapes from the keys: a per-key logit, softmaxed over keys.

    ``keys`` is [..., n, d_k]; the result is [..., 1, n] and broadcasts over
    the query rows.
    """
    logits = T.relu(keys @ w1 + b1) @ w2 + b2
    logits = logits.reshape(*logits.shape[:-2], 1, logits.shape[-2])
    return T.clamp(T.softmax(logits, axis=-1), ALPHA_FLOOR, None)


def upward_pass(phi_first, enc_w3, enc_b3):
    """h^{L+1} = softmax(phi^1), then h^l = softplus(h^{l+1} W3^l + b3^l) for l = L..1.

    ``enc_w3``/``enc_b3`` are per-layer lists (index 0 = first layer), already
    cut to the sequence length. Returns the list [h^1, ..., h^{L+1}].
    """
    n_layers = len(enc_w3)
    hs = [None] * (n_layers + 1)
    hs[n_layers] = T.softmax(phi_first, axis=-1)
    for l in reversed(range(n_layers)):
        hs[l] = T.softplus(hs[l + 1] @ enc_w3[l] + enc_b3[l])
    return hs


def encoder_params(phi, h, w1, b1, w2, b2, rho, sigma):
    """Weibull shape and (log) scale for one layer.

    k = rho * softplus(h W1 + b1) + exp(phi)
    lam = sigma * softplus(h W2 + b2) + exp(phi) / Gamma(1 + 1/k)
    """
    exp_phi = T.exp(phi)
    k = exp_phi if rho == 0 else T.scale(T.softplus(h @ w1 + b1), rho) + exp_phi
    k = T.clamp(k, K_FLOOR, None)
    lg = R.log_gamma_one_plus_inv(k)
    log_mean_part = phi - lg
    if sigma == 0:
        log_lam = log_mean_part
    else:
        sp = T.clamp(T.softplus(h @ w2 + b2), 1e-300, None)
        log_lam = T.logaddexp(T.log(sp) + math.log(sigma), log_mean_part)
    for what, t in (("shape", k), ("log-scale", log_lam)):
        if not np.all(np.isfinite(t.data)):
            raise FloatingPointError(f"non-finite Weibull {what} in encoder")
    return R.WeibullParams(k=k, log_lam=log_lam)


class BabnModel(AttentionModel):
    """Transformer whose attention weights are Weibull-distributed latent variables."""

    format_tag = "babn-ckpt"

    def __init__(self, config, constants=None, params=None, rng=None):
        self.constants = constants or BabnConstants()
        if params is None:
            if rng is None:
                raise ValueError("need either params or an rng to initialise them")
            params = {**init_base_params(config, rng), **init_babn_params(config, rng)}
        super().__init__(config, params=params)

    def expected_shapes(self):
        return {**base_param_shapes(self.config), **babn_param_shapes(self.config)}

    def _enc(self, l, i, n):
        pre = f"layers.{l}.enc."
        return self.params[pre + f"w{i}"][:, :n, :n], self.params[pre + f"b{i}"][:, :, :n]

    def _prior(self, l):
        pre = f"layers.{l}.prior."
        return [self.params[pre + s] for s in ("w1", "b1", "w2", "b2")]

    def forward(self, tokens, mode="posterior_mean", rng=None, eps=None, feature_noise=None,
                trace=False):
        """Run the network; returns logits, per-layer KL (batch mean) and an optional trace.

        In ``sample`` mode the noise for layer ``l`` is ``eps[l]`` if given,
        otherwise drawn from ``rng`` on Uniform(0.1, 0.9).
        """
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
        if mode == "sample" and eps is None and rng is None:
            raise ValueError("sample mode needs an rng or frozen eps")
        cfg, c = self.config, self.constants
        n_layers = cfg.n_layers
        tr = ForwardTrace(mode) if trace else None
        kls = []
        state = {}

        def weights_fn(l, phi, keys):
            n = phi.shape[-1]
            if l == 0:
                w3 = [self._enc(j, 3, n)[0] for j in range(n_layers)]
                b3 = [self._enc(j, 3, n)[1] for j in range(n_layers)]
                state["h"] = upward_pass(phi, w3, b3)
                if tr is not None:
                    tr.h_top = state["h"][n_layers].data
            h = state["h"][l]
            alpha = prior_alpha(keys, *self._prior(l))
            (w1, b1), (w2, b2) = self._enc(l, 1, n), self._enc(l, 2, n)
            q = encoder_params(phi, h, w1, b1, w2, b2, c.rho, c.sigma)
            if mode == "sample":
                if eps is not None:
                    e = eps[l]
                else:
                    e = R.sample_uniform(*R.TRAIN_EPS_RANGE, phi.shape, rng).data
                log_s = R.weibull_reparam_log(q, e)
            else:
                log_s = R.weibull_log_mean(q)
            w = T.softmax(log_s, axis=-1)
            kl_map = R.kl_weibull_gamma(q, R.GammaParams(alpha, c.beta))
            batch = phi.shape[0]
            kl = T.scale(kl_map.sum(), 1.0 / batch)
            kls.append(kl)
            if tr is not None:
                tr.layers.append(LayerTrace(
                    phi=phi.data, alpha=np.broadcast_to(alpha.data, phi.shape).copy(),
                    k=q.k.data, lam=np.exp(q.log_lam.data), s=np.exp(log_s.data),
                    w=w.data, h=h.data, kl=kl.item()))
            return w

        logits = self.classifier_head(self.features(tokens, feature_noise, weights_fn))
        n = logits.shape[1] if self.config.pooling == "tokens" else np.atleast_2d(tokens).shape[1]
        return ForwardOutput(logits=logits, kl=kls, trace=tr, kl_entries=cfg.n_heads * n * n)

    def predict_proba(self, tokens, feature_noise=None, mode="posterior_mean", rng=None):
        with T.no_grad():
            out = self.forward(tokens, mode=mode, rng=rng, feature_noise=feature_noise)
            return T.softmax(out.logits, -1).data

    def draw_eps(self, tokens, rng):
        """Frozen Uniform(0.1, 0.9) noise for every layer of a batch of ``tokens``."""
        tokens = np.atleast_2d(tokens)
        b, n = tokens.shape
        shape = (b, self.config.n_heads, n, n)
        return [R.sample_uniform(*R.TRAIN_EPS_RANGE, shape, rng).data for _ in range(self.config.n_layers)]


def posterior_stats(model, tokens, n_samples=20, rng=None, feature_noise=None):
    """Mean and std/mean of the normalised weights W over sampled forward passes.

    Returns a list over layers of (mean, std_over_mean) arrays shaped
    [batch, heads, n, n].
    """
    if n_samples < 2:
        raise ValueError("posterior_stats needs at least 2 samples")
    per_layer = [[] for _ in range(model.config.n_layers)]
    with T.no_grad():
        for _ in range(n_samples):
            out = model.forward(tokens, mode="sample", rng=rng, feature_noise=feature_noise, trace=True)
            for l, lt in enumerate(out.trace.layers):
                per_layer[l].append(lt.w)
    stats = []
    for ws in per_layer:
        ws = np.stack(ws)
        m = ws.mean(axis=0)
        stats.append((m, ws.std(axis=0) / m))
    return stats
