"""Greedy token-substitution attack on sequence classifiers."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .randvar import RngStream
from .train import predict


@dataclass
class AttackSpec:
    budget: int = 3
    pool_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.budget < 0 or self.pool_size < 1:
            raise ValueError("budget must be >= 0 and pool_size >= 1")


def toy_attack(model, data, spec):
    """Fraction of attacks that fail to flip a correct posterior-mean prediction.

    For every correctly classified input, up to ``budget`` times: try each
    candidate token (a per-input pool drawn from the vocabulary) at each
    position not yet modified, keep the single substitution that most raises
    the loss of the true label, and stop once the prediction flips.
    Returns a dict with rate, attempts, failures and per-input change counts.
    """
    if data.kind != "classification":
        raise ValueError("toy_attack needs a classification dataset")
    rng = RngStream(spec.seed)
    vocab = model.config.vocab_size
    probs = predict(model, data.tokens, data.feature_noise)
    correct = np.flatnonzero(probs.argmax(-1) == data.targets)
    failures = 0
    changes = []
    for i in correct:
        x = data.tokens[i].copy()
        y = data.targets[i]
        noise = None if data.feature_noise is None else data.feature_noise[i]
        pool = rng.split(int(i)).choice(vocab, size=min(spec.pool_size, vocab), replace=False)
        touched = set()
        flipped = False
        for _ in range(spec.budget):
            variants, where = [], []
            for pos in range(len(x)):
                if pos in touched:
                    continue
                for tok in pool:
                    if tok == x[pos]:
                        continue
                    v = x.copy()
                    v[pos] = tok
                    variants.append(v)
                    where.append(pos)
            if not variants:
                break
            variants = np.stack(variants)
            vn = None if noise is None else np.broadcast_to(noise, (len(variants),) + noise.shape)
            p = predict(model, variants, vn)
            best = int(np.argmin(p[:, y]))
            x = variants[best]
            touched.add(where[best])
            if p[best].argmax() != y:
                flipped = True
                break
        changes.append(len(touched))
        failures += not flipped
    attempts = len(correct)
    rate = failures / attempts if attempts else 1.0
    return {"rate": rate, "attempts": attempts, "failures": failures, "changes": changes}
