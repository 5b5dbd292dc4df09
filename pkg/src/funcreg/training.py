"""Optimizer, LR schedule, and the pretrain/fine-tune loops.

Every source of randomness is keyed from the config seeds (model init, batch
order, augmentation draws, probe/context sampling), so identical configs give
bit-identical final parameters and logs. The fine-tune loop follows:

    per step: sample batch -> draw augmented views -> combined loss ->
              backward -> AdamW update -> (EMA update when distilling)

The frozen reference snapshot is taken once, at fine-tune entry.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .augment import AugmentPolicy, apply_policy
from .data import BenchmarkData, Dataset, batches
from .errors import ConfigError, NumericError
from .metrics import evaluate
from .model import ModelState
from .regularizers import (RegularizerConfig, combined_loss,
                           sample_context_prototypes)
from .tensor import GradientTape

SCHEDULES = ("cosine", "constant")
_CONTEXT_STREAM = 808
_HOLDOUT_STREAM = 909


@dataclass(frozen=True)
class TrainConfig:
    phase: str = "finetune"
    epochs: int = 20
    batch_size: int = 64
    peak_lr: float = 1e-3
    warmup_steps: int = 50
    schedule: str = "cosine"
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    eval_every: int = 100
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    augment: AugmentPolicy = field(default_factory=AugmentPolicy)

    def __post_init__(self):
        if self.phase not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown phase {self.phase!r}")
        if self.peak_lr <= 0:
            raise ConfigError(f"peak_lr must be > 0, got {self.peak_lr}")
        if self.warmup_steps < 0:
            raise ConfigError(f"warmup_steps must be >= 0, got {self.warmup_steps}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.schedule not in SCHEDULES:
            raise ConfigError(f"unknown schedule {self.schedule!r}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.eval_every < 1:
            raise ConfigError(f"eval_every must be >= 1, got {self.eval_every}")


def lr_at(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear 0 -> peak over warmup_steps, then cosine peak -> 0 (or constant).

    The peak is hit exactly at step == warmup_steps.
    """
    if cfg.warmup_steps > 0 and step < cfg.warmup_steps:
        return cfg.peak_lr * (step / cfg.warmup_steps)
    if cfg.schedule == "constant":
        return cfg.peak_lr
    remaining = max(total_steps - cfg.warmup_steps, 1)
    progress = (step - cfg.warmup_steps) / remaining
    progress = min(max(progress, 0.0), 1.0)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# AdamW with decoupled weight decay

@dataclass
class AdamWState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def init(cls, named_params) -> "AdamWState":
        return cls(m={name: np.zeros_like(p.data) for name, p in named_params},
                   v={name: np.zeros_like(p.data) for name, p in named_params})


def optimizer_step(named_params, state: AdamWState, lr: float, weight_decay: float,
                   beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> None:
    """theta <- theta - lr * m_hat / (sqrt(v_hat) + eps) - lr * wd * theta.

    A missing gradient counts as zero (the decay still applies). Non-finite
    gradients abort with the offending parameter named.
    """
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, p in named_params:
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay != 0.0:
            p.data -= lr * weight_decay * p.data


# ---------------------------------------------------------------------------
# run logs

@dataclass(frozen=True)
class StepRecord:
    step: int
    lr: float
    loss_total: float
    loss_ce: float
    loss_far: Optional[float]
    loss_fcr: Optional[float]
    loss_reg: Optional[float]
    grad_norm: float


@dataclass(frozen=True)
class EvalRecord:
    step: int
    split: str
    acc: float
    loss: float
    recall_macro: float
    f1_macro: float


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


@dataclass
class RunLog:
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)

    def write_train_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "lr", "loss_ce", "loss_far", "loss_fcr",
                             "loss_reg", "grad_norm"])
            for r in self.steps:
                writer.writerow([r.step, repr(r.lr), _fmt(r.loss_ce),
                                 _fmt(r.loss_far), _fmt(r.loss_fcr),
                                 _fmt(r.loss_reg), repr(r.grad_norm)])

    def write_eval_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["step", "split", "acc", "loss", "recall_macro",
                             "f1_macro"])
            for r in self.evals:
                writer.writerow([r.step, r.split, repr(r.acc), repr(r.loss),
                                 repr(r.recall_macro), repr(r.f1_macro)])

    def final_eval(self, split: str) -> Optional[EvalRecord]:
        rows = [r for r in self.evals if r.split == split]
        return rows[-1] if rows else None


# ---------------------------------------------------------------------------
# training loops

def _grad_norm(named_params) -> float:
    total = 0.0
    for _, p in named_params:
        if p.grad is not None:
            total += float(np.sum(p.grad * p.grad))
    return math.sqrt(total)


def _train(m: ModelState, train_ds: Dataset, eval_splits: dict,
           cfg: TrainConfig, reg: RegularizerConfig) -> RunLog:
    params = m.trainable_parameters()
    state = AdamWState.init(params)
    steps_per_epoch = math.ceil(train_ds.n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    need_far = reg.method in ("far", "far_fcr") and reg.lambda1 != 0.0
    need_fcr = reg.method in ("fcr", "far_fcr") and reg.lambda2 != 0.0
    need_aug = need_far or need_fcr
    context = None
    if reg.method == "car":
        context = sample_context_prototypes(reg.car_contexts, m.encoder.embed_dim,
                                            seed=cfg.seed + _CONTEXT_STREAM)
    log = RunLog()
    step = 0
    for epoch in range(cfg.epochs):
        for xb, yb in batches(train_ds, cfg.batch_size, cfg.seed, epoch):
            lr = lr_at(step, cfg, total_steps)
            x_aug = apply_policy(cfg.augment, xb, step) if need_aug else None
            with GradientTape() as tape:
                loss, parts = combined_loss(m, xb, yb, x_aug, reg, step_seed=step,
                                            context_prototypes=context)
            total = loss.item()
            if not np.isfinite(total):
                raise NumericError(f"non-finite loss at step {step}")
            tape.backward(loss)
            grad_norm = _grad_norm(params)
            optimizer_step(params, state, lr, cfg.weight_decay, cfg.beta1,
                           cfg.beta2, cfg.eps)
            if reg.method == "ema_distill":
                m.ema_update(reg.ema_decay)
            m.zero_grads()
            log.steps.append(StepRecord(
                step=step, lr=lr, loss_total=total, loss_ce=parts["ce"],
                loss_far=parts.get("far"), loss_fcr=parts.get("fcr"),
                loss_reg=parts.get("reg"), grad_norm=grad_norm))
            step += 1
            if step % cfg.eval_every == 0 or step == total_steps:
                for name, ds in eval_splits.items():
                    sm = evaluate(m, ds)
                    log.evals.append(EvalRecord(
                        step=step, split=name, acc=sm.accuracy, loss=sm.loss,
                        recall_macro=sm.recall_macro, f1_macro=sm.f1_macro))
    return log


def pretrain_holdout_split(bench: BenchmarkData, seed: int) -> tuple:
    """Deterministic 90/10 carve of the pretrain split (train, holdout)."""
    n = bench.pretrain.n
    n_hold = max(1, n // 10)
    perm = np.random.default_rng([seed, _HOLDOUT_STREAM]).permutation(n)
    hold, train = perm[:n_hold], perm[n_hold:]
    mk = lambda idx: Dataset(features=bench.pretrain.features[idx].copy(),
                             labels=bench.pretrain.labels[idx].copy())
    return mk(train), mk(hold)


def pretrain(m: ModelState, bench: BenchmarkData, cfg: TrainConfig) -> RunLog:
    """Plain cross-entropy over the multi-domain pretrain split.

    Regularizers are a fine-tune concern; any configured method is ignored
    here. Convergence is tracked on a carved 10% holdout.
    """
    train_ds, holdout = pretrain_holdout_split(bench, cfg.seed)
    return _train(m, train_ds, {"pretrain_holdout": holdout}, cfg,
                  RegularizerConfig(method="none"))


def finetune(m: ModelState, bench: BenchmarkData, cfg: TrainConfig) -> RunLog:
    """Fine-tune on the ID train split with the configured regularizer.

    Takes the frozen snapshot at entry; initializes the EMA shadow at step 0
    when distilling. With epochs == 0 this is a documented no-op that leaves
    the parameters untouched and returns an empty log.
    """
    m.take_snapshot()
    if cfg.regularizer.method == "ema_distill":
        m.ema_init()
    return _train(m, bench.id_train, bench.eval_splits(), cfg, cfg.regularizer)
