"""Random streams, the Weibull reparameterisation, densities and the Weibull-to-gamma KL."""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .special import EULER_GAMMA, DomainError
from .special import lgamma as _lgamma_np
from .tensor import Tensor

TRAIN_EPS_RANGE = (0.1, 0.9)


class RngStream:
    """Seeded, splittable stream backed by the counter-based Philox generator.

    A stream is identified by ``(seed, path)``; ``split(key)`` appends ``key``
    to the path, so the same key sequence always gives the same child stream
    regardless of how many draws the parent has made.
    """

    def __init__(self, seed, path=()):
        self.seed = int(seed)
        self.path = tuple(path)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.gen = np.random.Generator(np.random.Philox(ss))

    def split(self, key):
        if isinstance(key, str):
            key = zlib.crc32(key.encode())
        return RngStream(self.seed, self.path + (int(key),))

    @property
    def counter(self):
        return int(self.gen.bit_generator.state["state"]["counter"][0])

    def __repr__(self):
        return f"RngStream(seed={self.seed}, path={self.path})"

    # thin pass-throughs used across the package
    def random(self, shape):
        return self.gen.random(shape)

    def open_unit(self, shape):
        """Uniform draws on the open interval (0, 1)."""
        return (self.gen.integers(0, 2**53, size=shape) + 0.5) / 2.0**53

    def normal(self, shape, scale=1.0):
        return self.gen.normal(0.0, scale, size=shape)

    def integers(self, lo, hi, shape=None):
        return self.gen.integers(lo, hi, size=shape)

    def permutation(self, n):
        return self.gen.permutation(n)

    def choice(self, n, size, replace=True):
        return self.gen.choice(n, size=size, replace=replace)


@dataclass
class WeibullParams:
    """Weibull shape ``k`` and scale ``lam``.

    ``log_lam`` may be supplied when the scale is formed in log space; it then
    takes precedence over ``lam`` for every computation, which keeps tiny
    scales from underflowing.
    """

    k: Tensor
    lam: Tensor = None
    log_lam: Tensor = None

    def __post_init__(self):
        self.k = T._wrap(self.k)
        if self.log_lam is None:
            if self.lam is None:
                raise ValueError("WeibullParams needs lam or log_lam")
            self.lam = T._wrap(self.lam)
            _require_positive(self.lam.data, "Weibull scale")
            self.log_lam = T.log(self.lam)
        else:
            self.log_lam = T._wrap(self.log_lam)
            if self.lam is None:
                self.lam = T.exp(self.log_lam)
        _require_positive(self.k.data, "Weibull shape")


@dataclass
class GammaParams:
    alpha: Tensor
    beta: float = 1.0

    def __post_init__(self):
        self.alpha = T._wrap(self.alpha)
        _require_positive(self.alpha.data, "gamma shape")
        if not self.beta > 0:
            raise DomainError(f"gamma rate must be positive, got {self.beta}")


def _require_positive(x, what):
    if not np.all(np.isfinite(x) & (x > 0)):
        raise DomainError(f"{what} must be positive and finite")


def sample_uniform(lo, hi, shape, rng):
    if not lo < hi:
        raise ValueError(f"sample_uniform needs lo < hi, got lo={lo}, hi={hi}")
    return Tensor(lo + (hi - lo) * rng.random(shape))


def _log_neg_log1m(eps):
    eps = eps.data if isinstance(eps, Tensor) else np.asarray(eps, dtype=np.float64)
    if not np.all((eps > 0) & (eps < 1)):
        raise DomainError("reparameterisation noise must lie in (0, 1)")
    return np.log(-np.log1p(-eps))


def weibull_reparam_log(q, eps):
    """log S for S = lam * (-log(1 - eps))^(1/k); eps is held constant."""
    return q.log_lam + Tensor(_log_neg_log1m(eps)) / q.k


def weibull_reparam(q, eps):
    return T.exp(weibull_reparam_log(q, eps))


def log_gamma_one_plus_inv(k):
    """log Gamma(1 + 1/k)."""
    return T.lgamma(1.0 + 1.0 / k)


def weibull_log_mean(q):
    return q.log_lam + log_gamma_one_plus_inv(q.k)


def weibull_mean(q):
    """lam * Gamma(1 + 1/k)."""
    return T.exp(weibull_log_mean(q))


def kl_weibull_gamma(q, p):
    """Elementwise KL(Weibull(k, lam) || Gamma(alpha, beta)) in closed form."""
    k, log_lam, alpha = q.k, q.log_lam, p.alpha
    beta = float(p.beta)
    mean_term = T.scale(weibull_mean(q), beta)
    return (T.scale(alpha / k, EULER_GAMMA) - alpha * log_lam + T.log(k) + mean_term
            - (EULER_GAMMA + 1.0) - T.scale(alpha, np.log(beta)) + T.lgamma(alpha))


def weibull_log_pdf(s, q):
    s = T._wrap(s)
    _require_positive(s.data, "Weibull support point")
    k, log_lam = q.k, q.log_lam
    log_s = T.log(s)
    return T.log(k) - k * log_lam + (k - 1.0) * log_s - T.exp(k * (log_s - log_lam))


def gamma_log_pdf(s, p):
    s = T._wrap(s)
    _require_positive(s.data, "gamma support point")
    beta = float(p.beta)
    alpha = p.alpha
    return (T.scale(alpha, np.log(beta)) - T.lgamma(alpha)
            + (alpha - 1.0) * T.log(s) - T.scale(s, beta))


def kl_mc_oracle(q, p, n, rng):
    """Monte Carlo KL estimate and its standard error, from ``n`` full-support draws.

    Works on the numeric values only; the result carries no gradient.
    """
    if n < 10_000:
        raise ValueError("kl_mc_oracle needs n >= 1e4")
    k = q.k.data
    log_lam = q.log_lam.data
    alpha = np.broadcast_to(p.alpha.data, k.shape)
    beta = float(p.beta)
    eps = rng.open_unit((n,) + k.shape)
    log_s = log_lam + np.log(-np.log1p(-eps)) / k
    s = np.exp(log_s)
    log_q = np.log(k) - k * log_lam + (k - 1.0) * log_s - np.exp(k * (log_s - log_lam))
    log_p = alpha * np.log(beta) - _lgamma_np(alpha) + (alpha - 1.0) * log_s - beta * s
    diff = log_q - log_p
    return diff.mean(axis=0), diff.std(axis=0, ddof=1) / np.sqrt(n)


def sample_gamma(p, rng, size=None):
    """Gamma(alpha, rate beta) draws (numpy's Marsaglia-Tsang sampler); no gradient."""
    alpha = p.alpha.data
    shape = alpha.shape if size is None else tuple(size) + alpha.shape
    return rng.gen.gamma(np.broadcast_to(alpha, shape), 1.0 / p.beta)
