"""AdamW with decoupled weight decay, and the warmup+cosine schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Parameter

ADAM_EPS = 1e-8


@dataclass
class TrainConfig:
    """Optimization hyperparameters for both training stages.

    The optimizer constants (betas 0.9/0.98, weight decay 0.05, peak lr 1e-4,
    stage-2 floor 5e-5) are the reference recipe; warmup/step counts default
    to the desk-scale schedule (the reference schedule is 2k warmup and
    250k/80k steps, see ``reference.REFERENCE``).
    """

    beta1: float = 0.9
    beta2: float = 0.98
    weight_decay: float = 0.05
    peak_lr: float = 1e-4
    min_lr_stage2: float = 5e-5
    warmup_steps: int = 100
    total_steps: int = 3000
    batch_size: int = 12
    seed: int = 1
    stage: int = 1  # 1 | 2
    llm_kind: str = "decoder"  # decoder | encdec
    grad_clip: float = 0.0  # global-norm clip; 0 disables (default off)
    objectives: dict[str, float] = field(
        default_factory=lambda: {"itc": 1.0, "itg": 1.0, "itm": 1.0})

    def __post_init__(self):
        if not (0 <= self.warmup_steps < self.total_steps):
            raise ValueError("need 0 <= warmup_steps < total_steps")
        if self.peak_lr <= 0 or self.min_lr_stage2 <= 0:
            raise ValueError("learning rates must be positive")
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if self.llm_kind not in ("decoder", "encdec"):
            raise ValueError("llm_kind must be 'decoder' or 'encdec'")

    @property
    def lr_floor(self) -> float:
        return self.min_lr_stage2 if self.stage == 2 else 0.0


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup 0 -> peak, then cosine decay peak -> floor.

    The floor is 0 in stage 1 and ``min_lr_stage2`` in stage 2. Continuous at
    the warmup boundary and exact at both endpoints.
    """
    if not 0 <= step <= config.total_steps:
        raise ValueError(f"step {step} outside [0, {config.total_steps}]")
    if step <= config.warmup_steps:
        if config.warmup_steps == 0:
            return config.peak_lr
        return config.peak_lr * step / config.warmup_steps
    progress = (step - config.warmup_steps) / (config.total_steps - config.warmup_steps)
    floor = config.lr_floor
    return floor + 0.5 * (config.peak_lr - floor) * (1.0 + math.cos(math.pi * progress))


@dataclass
class AdamWState:
    """First/second moments per parameter name plus the shared step counter."""

    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_global_norm(params: list[Parameter], max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    grads = [p.grad for p in params if not p.frozen and p.grad is not None]
    for g in grads:
        total += float((g * g).sum())
    norm = math.sqrt(total)
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        for g in grads:
            g *= factor
    return norm


def adamw_step(params: list[Parameter], state: AdamWState, lr: float,
               config: TrainConfig) -> None:
    """One decoupled-weight-decay Adam update over the non-frozen parameters.

    Parameters whose gradient is None (untouched by the loss graph) are
    skipped entirely: no moment update, no decay. Frozen parameters are never
    updated even when they carry gradients.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    state.step += 1
    t = state.step
    bc1 = 1.0 - config.beta1 ** t
    bc2 = 1.0 - config.beta2 ** t
    for p in params:
        if p.frozen or p.grad is None:
            continue
        g = p.grad
        m = state.m.get(p.name)
        if m is None:
            m = state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        v = state.v[p.name]
        m *= config.beta1
        m += (1.0 - config.beta1) * g
        v *= config.beta2
        v += (1.0 - config.beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data -= lr * (m_hat / (np.sqrt(v_hat) + ADAM_EPS) + config.weight_decay * p.data)
