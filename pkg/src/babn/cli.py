"""Command-line entry point: train, eval, convert, gradcheck, stats, attack."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import experiment as E
from .attack import AttackSpec, toy_attack
from .attention import AttentionModel
from .belief import BabnModel
from .checkpoint import Checkpoint, CheckpointError, convert_checkpoint, model_from_checkpoint
from .randvar import RngStream
from .train import TrainingDiverged, gradcheck_elbo

log = logging.getLogger("babn")

LOG_ENV = "BABN_LOG_LEVEL"
EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


def _setup_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")


def _emit(doc):
    print(json.dumps(doc, indent=2, sort_keys=True))


def cmd_train(args):
    cfg = C.load(args.config)
    out_dir = args.out or cfg.output_dir
    try:
        doc = E.run_experiment(cfg, out_dir)
    except TrainingDiverged as exc:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "divergence_history.csv").write_text(E.history_csv(exc.history))
        print(f"training diverged: {exc}; history written to {out / 'divergence_history.csv'}", file=sys.stderr)
        return EXIT_DIVERGED
    _emit({"output_dir": str(out_dir), "best_val_accuracy": doc["best_val_accuracy"],
           "splits": {k: {"accuracy": v["accuracy"], "ece": v["ece"], "pavpu": v["pavpu"]}
                      for k, v in doc["splits"].items()}})
    return EXIT_OK


def cmd_eval(args):
    cfg = C.load(args.config)
    model = model_from_checkpoint(Checkpoint.load(args.ckpt))
    datasets = E.load_datasets(cfg)
    mcfg = cfg.metrics
    if args.samples is not None:
        mcfg.samples = args.samples
    rng = RngStream(cfg.seed).split("eval")
    if args.mode == "sample":
        if not isinstance(model, BabnModel):
            raise CheckpointError("sample mode needs a babn-ckpt checkpoint")
        reports = {}
        from . import metrics
        for name in E.eval_splits(model, datasets):
            data = datasets[name]
            samples = E.sample_predictions(model, data, mcfg.samples, rng.split(name))
            reports[name] = metrics.calibration_report(samples.mean(axis=0), data.targets, samples,
                                                       mcfg.n_bins, mcfg.p_threshold, mcfg.conf_threshold)
    else:
        reports = E.evaluate_model(model, datasets, mcfg, rng)
    _emit({"mode": args.mode, "model_format": model.format_tag,
           "splits": {k: {key: r[key] for key in ("accuracy", "ece", "pavpu", "pavpu_method", "pavpu_cells")}
                      for k, r in reports.items()}})
    return EXIT_OK


def cmd_convert(args):
    det = Checkpoint.load(args.src)
    ckpt = convert_checkpoint(det, RngStream(args.seed).split("convert"), args.rho, args.sigma, args.beta)
    ckpt.save(args.dst)
    print(f"wrote {args.dst}")
    return EXIT_OK


def cmd_gradcheck(args):
    cfg = C.load(args.config)
    spec = E.task_spec(cfg)
    datasets = E.load_datasets(cfg)
    rng = RngStream(cfg.seed)
    acfg = E.attention_config(cfg, spec)
    if cfg.model["kind"] == "det":
        model = AttentionModel(acfg, rng=rng.split("init"))
    else:
        model = BabnModel(acfg, E.babn_constants(cfg), rng=rng.split("init"))
    batch = datasets["train"].subset(np.arange(args.batch))
    eps = model.draw_eps(batch.tokens, rng.split("gradcheck")) if isinstance(model, BabnModel) else None
    kw = dict(max_coords=args.max_coords, seed=cfg.seed)
    result = {"full": gradcheck_elbo(model, batch.tokens, batch.targets, eps, **kw),
              "nll_only": gradcheck_elbo(model, batch.tokens, batch.targets, eps, kl_weight=0.0, **kw)}
    if isinstance(model, BabnModel):
        result["kl_only"] = gradcheck_elbo(model, batch.tokens, batch.targets, eps, nll_weight=0.0, **kw)
    result["tolerance"] = GRADCHECK_TOL
    result["passed"] = all(v < GRADCHECK_TOL for k, v in result.items() if k not in ("tolerance",))
    _emit(result)
    return EXIT_OK if result["passed"] else EXIT_FAIL


def cmd_stats(args):
    cfg = C.load(args.config)
    text = E.checkpoint_stats(cfg, Checkpoint.load(args.ckpt), args.samples, args.example)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_attack(args):
    cfg = C.load(args.config)
    model = model_from_checkpoint(Checkpoint.load(args.ckpt))
    datasets = E.load_datasets(cfg)
    split = args.split or E.eval_splits(model, datasets)[-1]
    data = datasets[split]
    if data.kind != "classification":
        raise CheckpointError(f"split {split!r} is not a classification dataset")
    if args.limit:
        data = data.subset(np.arange(min(args.limit, len(data))))
    res = toy_attack(model, data, AttackSpec(budget=args.budget, pool_size=args.pool, seed=cfg.seed))
    _emit({"split": split, "budget": args.budget, "failed_attack_rate": res["rate"],
           "attempts": res["attempts"], "failures": res["failures"]})
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="babn", description="Bayesian attention belief network experiments")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train and evaluate from a config")
    t.add_argument("config")
    t.add_argument("--out", help="output directory (overrides output_dir)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on the config's splits")
    e.add_argument("config")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--mode", choices=["sample", "posterior_mean"], default="posterior_mean")
    e.add_argument("--samples", type=int)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("convert", help="turn a deterministic checkpoint into a BABN checkpoint")
    c.add_argument("--from", dest="src", required=True)
    c.add_argument("--to", dest="dst", required=True)
    c.add_argument("--rho", type=float, default=1.5)
    c.add_argument("--sigma", type=float, default=1e-6)
    c.add_argument("--beta", type=float, default=1.0)
    c.add_argument("--seed", type=int, default=0, help="seed for the new encoder/prior tensors")
    c.set_defaults(func=cmd_convert)

    g = sub.add_parser("gradcheck", help="compare autodiff and finite-difference ELBO gradients")
    g.add_argument("config")
    g.add_argument("--batch", type=int, default=2)
    g.add_argument("--max-coords", type=int, default=None, help="check a seeded subset per tensor")
    g.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("stats", help="posterior attention statistics table")
    s.add_argument("config")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--samples", type=int, default=20)
    s.add_argument("--example", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_stats)

    a = sub.add_parser("attack", help="greedy token-substitution attack")
    a.add_argument("config")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--budget", type=int, default=3)
    a.add_argument("--pool", type=int, default=8)
    a.add_argument("--split")
    a.add_argument("--limit", type=int, default=0, help="attack only the first N examples")
    a.set_defaults(func=cmd_attack)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    _setup_logging()
    try:
        return args.func(args)
    except C.ConfigError as exc:
        print(f"config error at {exc.path}: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
