"""Training: schedule, optimizer, losses, and the step/loop drivers.

Two regimes share one loop: ordinary next-token training (used for the
full-precision teacher) and sequence-level distillation, where the
student matches the teacher's full next-token distribution at every
position.  Gradients are averaged over the sequences of a batch, the
global norm is clipped, Adam applies the update, and latent binarized
weights are clamped back to [-1, 1] so the straight-through estimator
keeps a live mask.

Everything is deterministic given the seed: same corpus stream, same
initialization, same single-threaded arithmetic, bit-identical weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .fbi import FbiLinearParams
from .model import BiMambaModel, model_forward, named_parameters
from .tensor import Tape, Tensor

LOG_HEADER = "step\tlr\tloss\tgrad_norm\ttokens_seen"
DIVERGENCE_PATIENCE = 500


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 1000
    peak_lr: float = 1e-3
    warmup: int = 100
    batch_tokens: int = 2048
    seq_len: int = 256
    clip: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    log_every: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.steps < 1 or not 0 <= self.warmup < self.steps:
            raise ValueError("need steps >= 1 and 0 <= warmup < steps")
        if self.peak_lr <= 0 or self.clip <= 0 or self.seq_len < 1 or self.batch_tokens < 1:
            raise ValueError("peak_lr, clip, seq_len and batch_tokens must be positive")

    @property
    def final_lr(self) -> float:
        return self.peak_lr / 10.0

    @property
    def windows_per_step(self) -> int:
        return max(1, self.batch_tokens // self.seq_len)


def lr_at(cfg: TrainConfig, step: int) -> float:
    """Linear warmup to the peak, then cosine decay to peak/10.

    Exact endpoints: lr(warmup) == peak, lr(steps) == final.
    """
    if not 0 <= step <= cfg.steps:
        raise ValueError(f"step {step} outside [0, {cfg.steps}]")
    if step < cfg.warmup:
        return cfg.peak_lr * (step + 1) / cfg.warmup
    progress = (step - cfg.warmup) / (cfg.steps - cfg.warmup)
    return cfg.final_lr + (cfg.peak_lr - cfg.final_lr) * 0.5 * (1.0 + math.cos(math.pi * progress))


# === losses ===


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-token negative log-likelihood over all positions."""
    targets = np.asarray(targets)
    L, V = logits.shape
    if targets.shape != (L,):
        raise ValueError(f"targets {targets.shape} do not match logits rows {L}")
    onehot = np.zeros((L, V), dtype=logits.data.dtype)
    onehot[np.arange(L), targets] = 1.0
    return soft_cross_entropy(logits, onehot)


def soft_cross_entropy(logits: Tensor, target_probs: np.ndarray) -> Tensor:
    """-(1/n) sum_t p_target(t) . log p_model(t), n = number of positions.

    Subtracting the (student-independent) target entropy would turn this
    into the KL divergence; the gradients are identical, so the plain
    soft cross-entropy is what gets optimized.
    """
    target_probs = np.asarray(target_probs)
    if target_probs.shape != tuple(logits.shape):
        raise ValueError("target distribution shape does not match logits")
    n = logits.shape[0]
    logp = T.log_softmax_rows(logits)
    return T.neg(T.mul(T.tsum(T.mul(logp, target_probs)), 1.0 / n))


# === optimizer ===


class Adam:
    """Adam with bias correction; state is aligned with the param list."""

    def __init__(self, params: list[tuple[str, Tensor]], cfg: TrainConfig):
        self.params = params
        self.beta1, self.beta2, self.eps = cfg.beta1, cfg.beta2, cfg.eps
        self.t = 0
        self.m = [np.zeros_like(t.data) for _, t in params]
        self.v = [np.zeros_like(t.data) for _, t in params]

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for (_, p), m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_gradients(params: list[tuple[str, Tensor]], max_norm: float) -> float:
    """Scale all gradients so the global norm is at most max_norm.

    Returns the pre-clip global norm.
    """
    total = 0.0
    for _, p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if norm > max_norm:
        scale = max_norm / norm
        for _, p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def clamp_latent_weights(model: BiMambaModel) -> None:
    """Keep latent binarized weights in [-1, 1] (live straight-through mask)."""
    for blk in model.layers:
        for layer in (blk.in_proj, blk.out_proj):
            if isinstance(layer, FbiLinearParams):
                np.clip(layer.weight.data, -1.0, 1.0, out=layer.weight.data)


# === step and loop ===


def teacher_probs(teacher: BiMambaModel, tokens: np.ndarray) -> np.ndarray:
    """Teacher's next-token distributions, no gradient flow."""
    with T.no_grad():
        logits = model_forward(teacher, tokens)
        return T.softmax_rows(logits).data


def train_step(
    model: BiMambaModel,
    opt: Adam,
    batch: np.ndarray,
    lr: float,
    clip: float,
    teacher: BiMambaModel | None = None,
) -> dict:
    """One optimizer step over a (B, L+1) token batch; returns metrics."""
    B = batch.shape[0]
    for _, p in opt.params:
        p.zero_grad()
    losses = []
    for b in range(B):
        inputs, targets = batch[b, :-1], batch[b, 1:]
        probs = teacher_probs(teacher, inputs) if teacher is not None else None
        with Tape() as tape:
            logits = model_forward(model, inputs)
            if probs is None:
                loss = cross_entropy(logits, targets)
            else:
                loss = soft_cross_entropy(logits, probs)
        tape.backward(loss)
        losses.append(loss.item())
    for _, p in opt.params:
        if p.grad is not None:
            p.grad /= B
    grad_norm = clip_gradients(opt.params, clip)
    opt.step(lr)
    clamp_latent_weights(model)
    return {"loss": float(np.mean(losses)), "grad_norm": grad_norm, "lr": lr}


def run_training(
    model: BiMambaModel,
    stream,
    cfg: TrainConfig,
    teacher: BiMambaModel | None = None,
    log=None,
) -> list[dict]:
    """Full loop with logging and a divergence guard; returns the history."""
    opt = Adam(named_parameters(model), cfg)
    if log:
        log(LOG_HEADER)
    history: list[dict] = []
    tokens_seen = 0
    initial_loss = None
    bad_steps = 0
    for step in range(cfg.steps):
        lr = lr_at(cfg, step)
        batch = stream.next_batch(cfg.windows_per_step)
        try:
            metrics = train_step(model, opt, batch, lr, cfg.clip, teacher=teacher)
        except ValueError as e:
            raise TrainingError(f"step {step}: {e}") from e
        tokens_seen += batch.shape[0] * (batch.shape[1] - 1)
        metrics["step"] = step
        metrics["tokens_seen"] = tokens_seen
        history.append(metrics)
        if initial_loss is None:
            initial_loss = metrics["loss"]
        if metrics["loss"] > initial_loss:
            bad_steps += 1
            if bad_steps >= DIVERGENCE_PATIENCE:
                raise TrainingError(
                    f"diverged: loss {metrics['loss']:.4f} above initial "
                    f"{initial_loss:.4f} for {bad_steps} consecutive steps"
                )
        else:
            bad_steps = 0
        if log and (step % cfg.log_every == 0 or step == cfg.steps - 1):
            log(
                f"{step}\t{lr:.6g}\t{metrics['loss']:.6f}\t"
                f"{metrics['grad_norm']:.6f}\t{tokens_seen}"
            )
    return history


def train_teacher(model: BiMambaModel, stream, cfg: TrainConfig, log=None) -> list[dict]:
    """Next-token training of a full-precision model."""
    if model.config.scope != "none":
        raise TrainingError("teacher must be full-precision (scope='none')")
    return run_training(model, stream, cfg, teacher=None, log=log)


def distill(student: BiMambaModel, teacher: BiMambaModel, stream, cfg: TrainConfig, log=None) -> list[dict]:
    """Train a binarized student against the teacher's distributions."""
    if teacher.config.vocab_size != student.config.vocab_size:
        raise TrainingError("student and teacher vocabularies differ")
    return run_training(student, stream, cfg, teacher=teacher, log=log)
