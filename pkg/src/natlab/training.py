"""Minibatch training: adaptive moment estimation with linear warmup and an
inverse-square-root decay, global-norm gradient clipping, deterministic
batch sampling."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from .models import Batch, Model, make_batch


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 8
    learning_rate: float = 3e-3
    warmup_steps: int = 100
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-9
    grad_clip: float = 5.0
    weight_decay: float = 0.0     # decoupled, applied with the step lr
    feature_noise: float = 0.0    # std of Gaussian noise added per step
    eval_every: int = 0           # 0 disables early stopping
    target_error_rate: float = 0.0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")


class TrainingDiverged(RuntimeError):
    def __init__(self, step, diagnostics):
        super().__init__(f"non-finite loss at step {step}: {diagnostics}")
        self.step = step
        self.diagnostics = diagnostics


class AdamState:
    def __init__(self, params, cfg: TrainConfig):
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.step = 0
        self.cfg = cfg

    def lr(self, step):
        w = max(self.cfg.warmup_steps, 1)
        return self.cfg.learning_rate * min(step / w, np.sqrt(w / step))

    def update(self, params, grads):
        cfg = self.cfg
        self.step += 1
        norm_sq = sum(float((g ** 2).sum()) for g in grads.values())
        norm = np.sqrt(norm_sq)
        scale = 1.0
        if cfg.grad_clip > 0 and norm > cfg.grad_clip:
            scale = cfg.grad_clip / norm
        lr = self.lr(self.step)
        bias1 = 1.0 - cfg.beta1 ** self.step
        bias2 = 1.0 - cfg.beta2 ** self.step
        for k, g in grads.items():
            g = g * scale
            self.m[k] = cfg.beta1 * self.m[k] + (1 - cfg.beta1) * g
            self.v[k] = cfg.beta2 * self.v[k] + (1 - cfg.beta2) * g * g
            mhat = self.m[k] / bias1
            vhat = self.v[k] / bias2
            params[k] -= lr * mhat / (np.sqrt(vhat) + cfg.eps)
            if cfg.weight_decay:
                params[k] -= lr * cfg.weight_decay * params[k]


def train_step(model: Model, batch: Batch, opt: AdamState):
    """One forward/backward/update; returns the diagnostics dict."""
    g, P, loss, diag = model.forward_loss(batch)
    if not np.isfinite(loss.item()):
        raise TrainingDiverged(opt.step + 1, diag)
    grads = g.backward(loss)
    grad_by_name = {k: grads[t.node_id].data for k, t in P.items()}
    opt.update(model.params, grad_by_name)
    return diag


def train(model: Model, dataset, cfg: TrainConfig, eval_set=None,
          progress=None):
    """Train in place for cfg.steps minibatch steps; returns the loss curve
    as a list of (step, loss) pairs.

    With eval_every > 0 and an eval_set, training stops early once the token
    error rate on eval_set reaches target_error_rate.
    """
    from .metrics import error_rate, transcribe_set

    rng = np.random.default_rng(cfg.seed)
    opt = model._opt_state if getattr(model, "_opt_state", None) else AdamState(model.params, cfg)
    model._opt_state = opt
    curve = []
    n = len(dataset)
    if n == 0:
        raise ValueError("empty dataset")
    for _ in range(cfg.steps):
        idx = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        batch = make_batch([dataset[i] for i in sorted(idx)])
        if cfg.feature_noise > 0:
            noise = rng.standard_normal(batch.features.shape)
            # leave the zero padding untouched
            for b, T in enumerate(batch.feature_lengths):
                batch.features[b, :T] += cfg.feature_noise * noise[b, :T]
        diag = train_step(model, batch, opt)
        curve.append((opt.step, diag["total"]))
        if progress:
            progress(opt.step, diag)
        if (cfg.eval_every and eval_set and opt.step % cfg.eval_every == 0):
            speech = [u for u in eval_set if u.target]
            hyps = transcribe_set(model, speech)
            ter = error_rate(hyps, [u.target for u in speech])
            if ter <= cfg.target_error_rate:
                break
    return curve


def optimizer_extra(model: Model):
    """Serializable training state for checkpoint resume."""
    opt = getattr(model, "_opt_state", None)
    if opt is None:
        return {}
    extra = {"step": np.array(opt.step)}
    for k, v in opt.m.items():
        extra[f"adam_m.{k}"] = v
    for k, v in opt.v.items():
        extra[f"adam_v.{k}"] = v
    return extra


def restore_optimizer(model: Model, extra, cfg: TrainConfig):
    if "step" not in extra:
        return
    opt = AdamState(model.params, cfg)
    opt.step = int(extra["step"])
    for k in model.params:
        if f"adam_m.{k}" in extra:
            opt.m[k] = np.array(extra[f"adam_m.{k}"], dtype=np.float64)
            opt.v[k] = np.array(extra[f"adam_v.{k}"], dtype=np.float64)
    model._opt_state = opt
