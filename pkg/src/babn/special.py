"""Vectorised log-gamma and digamma kernels on float64 arrays."""

import math

import numpy as np

EULER_GAMMA = 0.57721566490153286061

# Lanczos approximation, g = 7, n = 9.
_LANCZOS_G = 7.0
_LANCZOS_COEF = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)


class DomainError(ValueError):
    """Raised when a function is evaluated outside its domain."""


def _check_positive(x, name):
    if not np.all(x > 0):
        bad = x[~(x > 0)]
        raise DomainError(f"{name} requires positive arguments, got {bad.ravel()[:5]}")


def _lanczos_lgamma(x):
    # valid for x >= 0.5
    z = x - 1.0
    series = np.full_like(z, _LANCZOS_COEF[0])
    for i in range(1, 9):
        series = series + _LANCZOS_COEF[i] / (z + i)
    t = z + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (z + 0.5) * np.log(t) - t + np.log(series)


def lgamma(x):
    """log Gamma(x) for x > 0."""
    x = np.asarray(x, dtype=np.float64)
    _check_positive(x, "lgamma")
    out = np.empty_like(x)
    small = x < 0.5
    if np.any(~small):
        out[~small] = _lanczos_lgamma(x[~small])
    if np.any(small):
        xs = x[small]
        # reflection: Gamma(x) Gamma(1 - x) = pi / sin(pi x)
        out[small] = math.log(math.pi) - np.log(np.sin(math.pi * xs)) - _lanczos_lgamma(1.0 - xs)
    return out


def digamma(x):
    """psi(x) = d/dx log Gamma(x) for x > 0.

    Shifts the argument up to x >= 10 with psi(x) = psi(x + 1) - 1/x, then
    uses the asymptotic expansion.
    """
    x = np.array(x, dtype=np.float64, copy=True)
    _check_positive(x, "digamma")
    acc = np.zeros_like(x)
    mask = x < 10.0
    while np.any(mask):
        acc[mask] -= 1.0 / x[mask]
        x[mask] += 1.0
        mask = x < 10.0
    inv = 1.0 / x
    inv2 = inv * inv
    tail = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (
        1.0 / 240 - inv2 * (1.0 / 132 - inv2 * (691.0 / 32760 - inv2 / 12.0))))))
    return acc + np.log(x) - 0.5 * inv - tail
