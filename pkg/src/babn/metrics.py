"""Accuracy, expected calibration error and PAvPU."""

from __future__ import annotations

import numpy as np
from scipy import stats


def _flat(probs, labels):
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.size == 0 or labels.size == 0:
        raise ValueError("empty record set")
    return probs.reshape(-1, probs.shape[-1]), labels.reshape(-1)


def accuracy(probs, labels):
    probs, labels = _flat(probs, labels)
    return float((probs.argmax(-1) == labels).mean())


def _bin_index(conf, n_bins):
    # right-closed bins (lo, hi]; 0 goes to the first bin, 1.0 to the last
    edges = np.arange(n_bins + 1) / n_bins
    return np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, n_bins - 1)


def confidence_histogram(probs, n_bins=10):
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        raise ValueError("empty record set")
    conf = probs.reshape(-1, probs.shape[-1]).max(-1)
    return np.bincount(_bin_index(conf, n_bins), minlength=n_bins)


def ece(probs, labels, n_bins=10):
    """Expected calibration error with equal-width confidence bins.

    ``probs`` are [..., classes] predictive probabilities, ``labels`` the
    matching integer labels. Returns (ece, table) where table rows are dicts
    with lo, hi, count, accuracy, confidence.
    """
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    probs, labels = _flat(probs, labels)
    conf = probs.max(-1)
    correct = (probs.argmax(-1) == labels).astype(np.float64)
    bins = _bin_index(conf, n_bins)
    n = len(conf)
    total = 0.0
    table = []
    for b in range(n_bins):
        mask = bins == b
        count = int(mask.sum())
        acc = float(correct[mask].mean()) if count else 0.0
        cf = float(conf[mask].mean()) if count else 0.0
        if count:
            total += count / n * abs(acc - cf)
        table.append({"lo": b / n_bins, "hi": (b + 1) / n_bins, "count": count,
                      "accuracy": acc, "confidence": cf})
    return total, table


def margin_certain(sample_probs, top, runner_up, p_threshold=0.05):
    """One-sided t-test that the mean margin p[top] - p[runner_up] over samples exceeds 0.

    ``sample_probs`` is [M, N, C]. A margin with zero spread counts as
    certain iff it is positive.
    """
    m = sample_probs.shape[0]
    idx = np.arange(sample_probs.shape[1])
    margins = sample_probs[:, idx, top] - sample_probs[:, idx, runner_up]
    mean = margins.mean(axis=0)
    sd = margins.std(axis=0, ddof=1)
    certain = np.zeros(len(mean), dtype=bool)
    flat = sd == 0
    certain[flat] = mean[flat] > 0
    t = mean[~flat] / (sd[~flat] / np.sqrt(m))
    certain[~flat] = stats.t.sf(t, df=m - 1) < p_threshold
    return certain


def _cells(accurate, certain):
    cells = {
        "n_ac": int((accurate & certain).sum()),
        "n_au": int((accurate & ~certain).sum()),
        "n_ic": int((~accurate & certain).sum()),
        "n_iu": int((~accurate & ~certain).sum()),
    }
    value = (cells["n_ac"] + cells["n_iu"]) / len(accurate)
    return value, cells


def pavpu(sample_probs, labels, mean_probs=None, p_threshold=0.05):
    """Patch accuracy vs patch uncertainty from M sampled predictive distributions.

    ``sample_probs`` is [M, ..., C]; ``mean_probs`` is the posterior-mean
    prediction used for accuracy and for picking the top/runner-up classes
    (defaults to the sample average).
    """
    sample_probs = np.asarray(sample_probs, dtype=np.float64)
    if sample_probs.shape[0] < 2:
        raise ValueError("pavpu needs at least 2 samples")
    c = sample_probs.shape[-1]
    sample_probs = sample_probs.reshape(sample_probs.shape[0], -1, c)
    if mean_probs is None:
        mean_probs = sample_probs.mean(axis=0)
    mean_probs, labels = _flat(mean_probs, labels)
    order = np.argsort(-mean_probs, axis=-1, kind="stable")
    top, runner = order[:, 0], order[:, 1]
    accurate = top == labels
    certain = margin_certain(sample_probs, top, runner, p_threshold)
    return _cells(accurate, certain)


def pavpu_threshold(probs, labels, conf_threshold=0.95):
    """PAvPU for a deterministic model: certain iff max probability >= threshold."""
    probs, labels = _flat(probs, labels)
    accurate = probs.argmax(-1) == labels
    certain = probs.max(-1) >= conf_threshold
    return _cells(accurate, certain)


def calibration_report(mean_probs, labels, sample_probs=None, n_bins=10, p_threshold=0.05,
                       conf_threshold=0.95):
    """Accuracy, ECE with its bin table, and PAvPU with its cells."""
    value, table = ece(mean_probs, labels, n_bins)
    report = {"accuracy": accuracy(mean_probs, labels), "ece": value, "bins": table}
    if sample_probs is not None:
        pv, cells = pavpu(sample_probs, labels, mean_probs, p_threshold)
        report["pavpu_method"] = "margin_ttest"
    else:
        pv, cells = pavpu_threshold(mean_probs, labels, conf_threshold)
        report["pavpu_method"] = "confidence_threshold"
    report["pavpu"] = pv
    report["pavpu_cells"] = cells
    return report
