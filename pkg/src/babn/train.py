"""ELBO objective, KL annealing, Adam and the training loop."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .belief import BabnModel
from .checkpoint import checkpoint_from_model, model_from_checkpoint

log = logging.getLogger(__name__)

KL_REDUCTIONS = ("mean", "sum")


class TrainingDiverged(RuntimeError):
    def __init__(self, message, history):
        super().__init__(message)
        self.history = history


class NonFiniteLoss(FloatingPointError):
    def __init__(self, message, diagnostics):
        super().__init__(f"{message}: {diagnostics}")
        self.diagnostics = diagnostics


@dataclass
class AnnealSchedule:
    w0: float = 1e-3
    warmup_steps: int = 0
    total_steps: int = 0

    def __post_init__(self):
        if not 0 < self.w0 <= 1:
            raise ValueError(f"anneal start weight must be in (0, 1], got {self.w0}")


def kl_anneal(step, schedule):
    """Linear ramp from w0 to 1 over ``warmup_steps``, then 1."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if schedule.warmup_steps <= 0 or step >= schedule.warmup_steps:
        return 1.0
    return schedule.w0 + (1.0 - schedule.w0) * step / schedule.warmup_steps


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """Bias-corrected Adam, in place on ``params`` (name -> Tensor).

    Returns False (and leaves everything untouched) if any gradient is non-finite.
    """
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        log.warning("non-finite gradient at step %d; update skipped", state.step)
        return False
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        params[name].data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return True


def clip_global_norm(grads, max_norm):
    total = float(np.sqrt(sum(float((g * g).sum()) for g in grads.values())))
    if max_norm and total > max_norm:
        s = max_norm / total
        for g in grads.values():
            g *= s
    return total


def elbo_loss(logits, y, kl_terms, kl_weight, nll_weight=1.0, kl_divisor=None):
    """Negative annealed ELBO: nll_weight * NLL + kl_weight * sum of layer KLs / kl_divisor.

    By default the divisor is the sequence length for per-position (3-d)
    logits, so NLL and KL are both per-token quantities, and 1 otherwise.
    Returns the loss tensor and a dict of float parts.
    """
    nll = T.cross_entropy(logits, y)
    kl_total = None
    for term in kl_terms:
        kl_total = term if kl_total is None else kl_total + term
    loss = T.scale(nll, nll_weight)
    kl_value = 0.0
    if kl_total is not None:
        if kl_divisor is None:
            kl_divisor = logits.shape[1] if logits.ndim == 3 else 1
        if kl_divisor != 1:
            kl_total = T.scale(kl_total, 1.0 / kl_divisor)
        kl_value = kl_total.item()
        loss = loss + T.scale(kl_total, kl_weight)
    parts = {"nll": nll.item(), "kl": kl_value, "kl_weight": kl_weight, "loss": loss.item()}
    if not np.isfinite(parts["loss"]):
        diag = {"layer_kl": [float(t.item()) for t in kl_terms], **parts}
        raise NonFiniteLoss("non-finite loss", diag)
    return loss, parts


@dataclass
class TrainConfig:
    steps: int = 5000
    batch_size: int = 32
    lr: float = 1e-3
    clip: float = 1.0
    eval_every: int = 200
    anneal_w0: float = 1e-3
    warmup_frac: float = 0.1
    eval_batch: int = 500
    kl_reduction: str = "mean"

    def __post_init__(self):
        if self.kl_reduction not in KL_REDUCTIONS:
            raise ValueError(f"kl_reduction must be one of {KL_REDUCTIONS}, got {self.kl_reduction!r}")


@dataclass
class TrainHistory:
    step: list = field(default_factory=list)
    nll: list = field(default_factory=list)
    kl: list = field(default_factory=list)
    kl_weight: list = field(default_factory=list)
    loss: list = field(default_factory=list)
    eval_step: list = field(default_factory=list)
    eval_acc: list = field(default_factory=list)
    eval_nll: list = field(default_factory=list)
    best_step: int = -1
    best_acc: float = -1.0


def model_loss(model, tokens, targets, kl_weight, rng=None, eps=None, feature_noise=None, nll_weight=1.0,
               kl_reduction="sum"):
    """Single-sample loss for either model type.

    ``kl_reduction="sum"`` is the per-example (per-token for tagging) ELBO;
    ``"mean"`` divides each layer's KL by its number of attention entries.
    """
    if isinstance(model, BabnModel):
        out = model.forward(tokens, mode="sample", rng=rng, eps=eps, feature_noise=feature_noise)
        divisor = out.kl_entries if kl_reduction == "mean" else None
        return elbo_loss(out.logits, targets, out.kl, kl_weight, nll_weight, divisor)
    logits = model.forward(tokens, feature_noise=feature_noise)
    return elbo_loss(logits, targets, [], kl_weight, nll_weight)


def predict(model, tokens, feature_noise=None, batch=500, mode="posterior_mean", rng=None):
    """Class probabilities over a dataset, in batches. Posterior-mean mode by default."""
    out = []
    for i in range(0, len(tokens), batch):
        noise = None if feature_noise is None else feature_noise[i:i + batch]
        if isinstance(model, BabnModel):
            out.append(model.predict_proba(tokens[i:i + batch], noise, mode=mode, rng=rng))
        else:
            out.append(model.predict_proba(tokens[i:i + batch], noise))
    return np.concatenate(out)


def evaluate(model, data, batch=500):
    probs = predict(model, data.tokens, data.feature_noise, batch)
    pred = probs.argmax(-1)
    acc = float((pred == data.targets).mean())
    p_true = np.take_along_axis(probs, data.targets[..., None], -1)[..., 0]
    nll = float(-np.log(np.maximum(p_true, 1e-300)).mean())
    return acc, nll


def train(model, train_data, val_data, config, rng):
    """Minimise the single-sample negative ELBO with Adam.

    Each step draws a minibatch and one noise sample, evaluates the loss with
    the annealed KL weight, clips the gradient and updates. Every
    ``eval_every`` steps (and at the end) the model is scored on
    ``val_data`` in posterior-mean mode and the best checkpoint is kept.
    Returns (best Checkpoint, TrainHistory).
    """
    schedule = AnnealSchedule(config.anneal_w0, int(round(config.warmup_frac * config.steps)), config.steps)
    state = AdamState(lr=config.lr)
    hist = TrainHistory()
    batch_rng = rng.split("batches")
    noise_rng = rng.split("noise")
    best = None
    consecutive_bad = 0
    n = len(train_data.tokens)
    for step in range(config.steps):
        idx = batch_rng.integers(0, n, config.batch_size)
        noise = None if train_data.feature_noise is None else train_data.feature_noise[idx]
        w = kl_anneal(step, schedule)
        for p in model.parameters():
            p.grad = None
        try:
            loss, parts = model_loss(model, train_data.tokens[idx], train_data.targets[idx], w,
                                     rng=noise_rng, feature_noise=noise, kl_reduction=config.kl_reduction)
        except (NonFiniteLoss, FloatingPointError) as exc:
            consecutive_bad += 1
            log.warning("step %d: %s", step, exc)
            if consecutive_bad >= 2:
                raise TrainingDiverged(f"loss non-finite twice in a row at step {step}", hist) from exc
            continue
        consecutive_bad = 0
        loss.backward()
        grads = {name: (np.zeros_like(p.data) if p.grad is None else p.grad) for name, p in model.params.items()}
        clip_global_norm(grads, config.clip)
        adam_step(model.params, grads, state)
        hist.step.append(step)
        hist.nll.append(parts["nll"])
        hist.kl.append(parts["kl"])
        hist.kl_weight.append(w)
        hist.loss.append(parts["loss"])
        last = step == config.steps - 1
        if (step + 1) % config.eval_every == 0 or last:
            acc, nll = evaluate(model, val_data, config.eval_batch)
            hist.eval_step.append(step + 1)
            hist.eval_acc.append(acc)
            hist.eval_nll.append(nll)
            log.info("step %d  loss %.4f  nll %.4f  kl %.3f  val_acc %.4f", step + 1, parts["loss"],
                     parts["nll"], parts["kl"], acc)
            if acc > hist.best_acc:
                hist.best_acc, hist.best_step = acc, step + 1
                best = checkpoint_from_model(model, meta={"step": step + 1})
    if best is None:
        best = checkpoint_from_model(model, meta={"step": config.steps})
    return best, hist


def restore(ckpt):
    return model_from_checkpoint(ckpt)


def gradcheck_elbo(model, tokens, targets, eps, kl_weight=1.0, nll_weight=1.0, step=1e-5, floor=None,
                   max_coords=None, seed=0):
    """Autodiff vs central differences for the frozen-noise negative ELBO.

    The relative error denominator is floored at 1e-5 * max(1, |loss|), the
    scale below which central differences at this step size are dominated by
    float64 round-off.
    """
    def f():
        loss, _ = model_loss(model, tokens, targets, kl_weight, eps=eps, nll_weight=nll_weight)
        return loss

    if floor is None:
        with T.no_grad():
            floor = 1e-5 * max(1.0, abs(f().item()))
    return T.gradcheck(f, model.parameters(), step=step, seed=seed, max_coords=max_coords, floor=floor)
