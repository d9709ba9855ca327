"""Synthetic benchmark tasks: copy, key-value retrieval and shifted token clusters."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .randvar import RngStream

TASK_KINDS = ("copy", "retrieval", "clusters")


@dataclass
class Dataset:
    tokens: np.ndarray
    targets: np.ndarray
    kind: str  # "tagging" or "classification"
    feature_noise: np.ndarray = None

    def __len__(self):
        return len(self.tokens)

    def subset(self, idx):
        noise = None if self.feature_noise is None else self.feature_noise[idx]
        return Dataset(self.tokens[idx], self.targets[idx], self.kind, noise)


@dataclass
class TaskSpec:
    kind: str = "copy"
    vocab_size: int = 16
    seq_len: int = 10
    n_train: int = 20000
    n_val: int = 1000
    n_test: int = 1000
    n_pairs: int = 4
    n_classes: int = 2
    sharpness: float = 1.0
    shift: float = 0.0
    noise: float = 0.0
    feature_dim: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ValueError(f"task kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.vocab_size < 2:
            raise ValueError("vocab_size must be at least 2")
        if self.shift < 0 or self.noise < 0:
            raise ValueError("shift and noise must be nonnegative")
        if self.kind == "retrieval" and not 1 <= self.n_pairs <= self.vocab_size // 2:
            raise ValueError(f"retrieval needs 1 <= n_pairs <= vocab_size/2, got {self.n_pairs}")

    @property
    def input_len(self):
        return 2 * self.n_pairs + 1 if self.kind == "retrieval" else self.seq_len

    @property
    def output_classes(self):
        return self.n_classes if self.kind == "clusters" else self.vocab_size

    @property
    def pooling(self):
        return {"copy": "tokens", "retrieval": "last", "clusters": "mean"}[self.kind]


def _copy_split(spec, n, rng):
    tokens = rng.integers(0, spec.vocab_size, (n, spec.seq_len))
    return Dataset(tokens, tokens.copy(), "tagging")


def gen_copy_task(spec, rng=None):
    """Random token sequences; the target at every position is the input token."""
    rng = rng or RngStream(spec.seed)
    return {name: _copy_split(spec, size, rng.split(name))
            for name, size in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test))}


def _retrieval_split(spec, n, rng):
    half = spec.vocab_size // 2
    p = spec.n_pairs
    keys = np.argsort(rng.random((n, half)), axis=1)[:, :p]
    values = half + np.argsort(rng.random((n, spec.vocab_size - half)), axis=1)[:, :p]
    which = rng.integers(0, p, n)
    tokens = np.empty((n, 2 * p + 1), dtype=np.int64)
    tokens[:, 0:2 * p:2] = keys
    tokens[:, 1:2 * p:2] = values
    tokens[:, -1] = keys[np.arange(n), which]
    return Dataset(tokens, values[np.arange(n), which], "classification")


def gen_retrieval_task(spec, rng=None):
    """Sequences k1 v1 ... kP vP q with distinct keys and values; target = value of key q.

    Keys come from the lower half of the vocabulary, values from the upper half.
    """
    rng = rng or RngStream(spec.seed)
    return {name: _retrieval_split(spec, size, rng.split(name))
            for name, size in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test))}


def cluster_distributions(spec, rng, shifted=False):
    """Per-class token distributions, [n_classes, vocab]."""
    base = rng.split("prototypes").normal((spec.n_classes, spec.vocab_size))
    logits = spec.sharpness * base
    if shifted:
        logits = logits + spec.shift * rng.split("shift").normal((spec.n_classes, spec.vocab_size))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _sample_clusters(dists, n, seq_len, rng):
    labels = rng.integers(0, len(dists), n)
    u = rng.random((n, seq_len))
    cdf = np.cumsum(dists, axis=1)
    cdf[:, -1] = 1.0
    tokens = np.empty((n, seq_len), dtype=np.int64)
    for c in range(len(dists)):
        rows = labels == c
        tokens[rows] = np.searchsorted(cdf[c], u[rows], side="right")
    return Dataset(tokens, labels, "classification")


def gen_clusters_task(spec, rng=None):
    """Sequence classification from class-conditional token distributions.

    Returns train/val/test_id from the training distributions, test_od from
    distributions whose logits are shifted by ``spec.shift`` times a fixed
    Gaussian direction, and test_noisy = test_id plus Gaussian feature noise
    of std ``spec.noise`` added to the embedded inputs.
    """
    rng = rng or RngStream(spec.seed)
    dists = cluster_distributions(spec, rng)
    od = cluster_distributions(spec, rng, shifted=True)
    out = {}
    for name, size in (("train", spec.n_train), ("val", spec.n_val), ("test_id", spec.n_test)):
        out[name] = _sample_clusters(dists, size, spec.seq_len, rng.split(name))
    out["test_od"] = _sample_clusters(od, spec.n_test, spec.seq_len, rng.split("test_od"))
    test = out["test_id"]
    noise = None
    if spec.noise > 0:
        noise = rng.split("test_noisy").normal((spec.n_test, spec.seq_len, spec.feature_dim), scale=spec.noise)
    out["test_noisy"] = Dataset(test.tokens.copy(), test.targets.copy(), test.kind, noise)
    return out


def bayes_classify(dists, tokens):
    """Maximum-likelihood class under the given token distributions (uniform class prior)."""
    logp = np.log(dists)[:, tokens]  # [C, N, n]
    return logp.sum(axis=-1).argmax(axis=0)


def generate(spec):
    if spec.kind == "copy":
        return gen_copy_task(spec)
    if spec.kind == "retrieval":
        return gen_retrieval_task(spec)
    return gen_clusters_task(spec)
