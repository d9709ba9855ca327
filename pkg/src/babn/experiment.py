"""Experiment runner: builds task and model from a config, trains, evaluates, writes reports."""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import metrics
from .attention import AttentionConfig, AttentionModel
from .belief import BabnConstants, BabnModel, posterior_stats
from .checkpoint import Checkpoint, convert_checkpoint, model_from_checkpoint
from .randvar import RngStream
from .tasks import TaskSpec, generate
from .train import TrainConfig, TrainingDiverged, predict, train

log = logging.getLogger(__name__)

REPORT_VERSION = 1
MODEL_DEFAULTS = {"d_model": 64, "n_heads": 4, "n_layers": 2, "ffn_hidden": 128}


def task_spec(cfg):
    fields = dict(cfg.task)
    d_model = cfg.model.get("d_model", MODEL_DEFAULTS["d_model"])
    return TaskSpec(**fields, feature_dim=d_model, seed=cfg.seed)


def attention_config(cfg, spec):
    m = {k: cfg.model.get(k, v) for k, v in MODEL_DEFAULTS.items()}
    return AttentionConfig(**m, vocab_size=spec.vocab_size, max_seq_len=spec.input_len,
                           n_classes=spec.output_classes, pooling=spec.pooling)


def babn_constants(cfg):
    m = cfg.model
    return BabnConstants(rho=m.get("rho", 1.5), sigma=m.get("sigma", 1e-6), beta=m.get("beta", 1.0))


def train_config(cfg, **overrides):
    return TrainConfig(**{**cfg.train, **overrides})


def build_model(cfg, spec, datasets, rng):
    """Initial model for the run, plus an optional pretraining record.

    A BABN model starts from scratch, from a det-attn checkpoint
    (``init_from``), or from a deterministic model trained here for
    ``pretrain_steps`` and then converted.
    """
    acfg = attention_config(cfg, spec)
    kind = cfg.model["kind"]
    if kind == "det":
        return AttentionModel(acfg, rng=rng.split("init")), None
    consts = babn_constants(cfg)
    if "init_from" in cfg.model:
        det = Checkpoint.load(cfg.model["init_from"])
        ckpt = convert_checkpoint(det, rng.split("convert"), consts.rho, consts.sigma, consts.beta)
        return model_from_checkpoint(ckpt), {"init_from": cfg.model["init_from"]}
    if cfg.model.get("pretrain_steps", 0) > 0:
        det = AttentionModel(acfg, rng=rng.split("init"))
        tc = train_config(cfg, steps=cfg.model["pretrain_steps"])
        det_ckpt, hist = train(det, datasets["train"], datasets["val"], tc, rng.split("pretrain"))
        ckpt = convert_checkpoint(det_ckpt, rng.split("convert"), consts.rho, consts.sigma, consts.beta)
        return model_from_checkpoint(ckpt), {"det_checkpoint": det_ckpt, "history": hist}
    return BabnModel(acfg, consts, rng=rng.split("init")), None


def eval_splits(model, datasets):
    return [name for name in datasets if name != "train"]


def sample_predictions(model, data, n_samples, rng, batch=500):
    return np.stack([predict(model, data.tokens, data.feature_noise, batch, mode="sample", rng=rng)
                     for _ in range(n_samples)])


def evaluate_model(model, datasets, mcfg, rng):
    """Calibration report per evaluation split (posterior-mean predictions)."""
    reports = {}
    for name in eval_splits(model, datasets):
        data = datasets[name]
        mean_probs = predict(model, data.tokens, data.feature_noise)
        samples = None
        if isinstance(model, BabnModel):
            samples = sample_predictions(model, data, mcfg.samples, rng.split(name))
        reports[name] = metrics.calibration_report(
            mean_probs, data.targets, samples, mcfg.n_bins, mcfg.p_threshold, mcfg.conf_threshold)
    return reports


def _csv(rows, header):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def history_csv(hist):
    return _csv(zip(hist.step, hist.nll, hist.kl, hist.kl_weight, hist.loss),
                ["step", "nll", "kl", "kl_weight", "loss"])


def eval_history_csv(hist):
    return _csv(zip(hist.eval_step, hist.eval_acc, hist.eval_nll), ["step", "val_accuracy", "val_nll"])


def reliability_csv(report):
    return _csv([(i, b["lo"], b["hi"], b["count"], b["accuracy"], b["confidence"])
                 for i, b in enumerate(report["bins"])],
                ["bin", "lo", "hi", "count", "accuracy", "confidence"])


def pavpu_csv(report):
    return _csv(list(report["pavpu_cells"].items()), ["cell", "count"])


def attention_stats_csv(stats, example=0, row=0):
    """Flatten posterior_stats for batch row ``row``, labelled as ``example``."""
    rows = []
    for l, (mean, cv) in enumerate(stats):
        _, n_heads, m, n = mean.shape
        for h in range(n_heads):
            for i in range(m):
                for j in range(n):
                    rows.append((example, l, h, i, j, mean[row, h, i, j], cv[row, h, i, j]))
    return _csv(rows, ["example", "layer", "head", "query", "key", "mean", "std_over_mean"])


def summary_doc(cfg, model, hist, reports, extra=None):
    doc = {
        "report_version": REPORT_VERSION,
        "config": {"seed": cfg.seed, "task": cfg.task, "model": cfg.model, "train": cfg.train,
                   "metrics": asdict(cfg.metrics)},
        "model_format": model.format_tag,
        "best_step": hist.best_step,
        "best_val_accuracy": hist.best_acc,
        "splits": {name: {k: r[k] for k in ("accuracy", "ece", "pavpu", "pavpu_method", "pavpu_cells")}
                   for name, r in reports.items()},
    }
    if model.format_tag == "det-attn":
        doc["pavpu_note"] = ("deterministic model: certain iff max class probability >= "
                             f"{cfg.metrics.conf_threshold}")
    if extra:
        doc.update(extra)
    return doc


def write_reports(out_dir, cfg, model, ckpt, hist, reports, extra=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt.save(out / "checkpoint.json")
    (out / "history.csv").write_text(history_csv(hist))
    (out / "eval_history.csv").write_text(eval_history_csv(hist))
    for name, r in reports.items():
        (out / f"reliability_{name}.csv").write_text(reliability_csv(r))
        (out / f"pavpu_{name}.csv").write_text(pavpu_csv(r))
    doc = summary_doc(cfg, model, hist, reports, extra)
    (out / "summary.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc


def run_experiment(cfg, out_dir=None):
    """Train and evaluate as configured; returns the summary document."""
    out_dir = out_dir or cfg.output_dir
    rng = RngStream(cfg.seed)
    spec = task_spec(cfg)
    datasets = generate(spec)
    model, pre = build_model(cfg, spec, datasets, rng)
    extra = {}
    if pre and "det_checkpoint" in pre:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        pre["det_checkpoint"].save(out / "pretrain_checkpoint.json")
        (out / "pretrain_history.csv").write_text(history_csv(pre["history"]))
        extra["pretrain_best_val_accuracy"] = pre["history"].best_acc
    elif pre:
        extra.update(pre)
    ckpt, hist = train(model, datasets["train"], datasets["val"], train_config(cfg), rng.split("train"))
    best = model_from_checkpoint(ckpt)
    reports = evaluate_model(best, datasets, cfg.metrics, rng.split("eval"))
    return write_reports(out_dir, cfg, best, ckpt, hist, reports, extra)


def load_datasets(cfg):
    return generate(task_spec(cfg))


def checkpoint_stats(cfg, ckpt, n_samples, example=0):
    model = model_from_checkpoint(ckpt)
    if not isinstance(model, BabnModel):
        raise ValueError("attention statistics need a babn-ckpt checkpoint")
    datasets = load_datasets(cfg)
    data = datasets[eval_splits(model, datasets)[-1]].subset(slice(example, example + 1))
    rng = RngStream(cfg.seed).split("stats")
    stats = posterior_stats(model, data.tokens, n_samples, rng, data.feature_noise)
    return attention_stats_csv(stats, example)


def run_ablation(cfg, variants, rng=None):
    """Convert one pretrained deterministic model under several (rho, sigma) settings.

    The deterministic model is trained for ``cfg.model["pretrain_steps"]``
    steps, then each variant is converted from that checkpoint and finetuned
    for ``cfg.train["steps"]``. A variant whose training diverges is scored
    with the parameters it had when training stopped. Returns one dict per
    variant with rho, sigma, test_accuracy, best_val_accuracy and diverged.
    """
    rng = rng or RngStream(cfg.seed)
    spec = task_spec(cfg)
    datasets = generate(spec)
    det = AttentionModel(attention_config(cfg, spec), rng=rng.split("init"))
    det_ckpt, _ = train(det, datasets["train"], datasets["val"],
                        train_config(cfg, steps=cfg.model["pretrain_steps"]), rng.split("pretrain"))
    test = datasets["test"] if "test" in datasets else datasets["test_id"]
    beta = cfg.model.get("beta", 1.0)
    out = []
    for rho, sigma in variants:
        model = model_from_checkpoint(convert_checkpoint(det_ckpt, rng.split("convert"), rho, sigma, beta))
        diverged = False
        try:
            ckpt, hist = train(model, datasets["train"], datasets["val"], train_config(cfg), rng.split("train"))
            model, best_val = model_from_checkpoint(ckpt), hist.best_acc
        except TrainingDiverged as exc:
            log.warning("rho=%g sigma=%g: %s", rho, sigma, exc)
            diverged, best_val = True, None
        acc = metrics.accuracy(predict(model, test.tokens, test.feature_noise), test.targets)
        out.append({"rho": rho, "sigma": sigma, "test_accuracy": acc, "best_val_accuracy": best_val,
                    "diverged": diverged})
    return out
