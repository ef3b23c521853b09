"""AdamW with decoupled weight decay, plus the linear-warmup cosine schedule
used by every training stage."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, PoisonedGradientError
from .ndgrad import Tensor


@dataclass
class LrSchedule:
    peak_lr: float = 5e-4
    warmup_steps: int = 10
    total_steps: int = 1000

    def __post_init__(self):
        if not (0 <= self.warmup_steps < self.total_steps):
            raise ContractError(
                f"need 0 <= warmup_steps < total_steps, got "
                f"{self.warmup_steps}/{self.total_steps}")
        if self.peak_lr <= 0:
            raise ContractError(f"peak_lr must be positive, got {self.peak_lr}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Linear ramp 0 -> peak over warmup, then cosine decay to 0."""
    if not (0 <= step <= schedule.total_steps):
        raise ContractError(
            f"step {step} outside [0, {schedule.total_steps}]")
    if step < schedule.warmup_steps:
        return schedule.peak_lr * step / schedule.warmup_steps
    p = (step - schedule.warmup_steps) / (schedule.total_steps - schedule.warmup_steps)
    return schedule.peak_lr * 0.5 * (1.0 + math.cos(math.pi * p))


@dataclass
class AdamWState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    no_decay: set = field(default_factory=set)  # parameter names exempt from decay
    t: int = 0
    m: dict = field(default_factory=dict)  # name -> first moment
    v: dict = field(default_factory=dict)  # name -> second moment


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr: float) -> None:
    """One bias-corrected AdamW update over every param whose .grad is set.

    Decoupled decay shrinks the parameter before the Adam delta; gradients
    are consumed (cleared) by the step.
    """
    if lr < 0:
        raise ContractError(f"lr must be >= 0, got {lr}")
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            raise PoisonedGradientError(f"non-finite gradient in {name!r}")
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    for name in sorted(params):
        p = params[name]
        g = p.grad
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            state.m[name] = m
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        if state.weight_decay and name not in state.no_decay:
            p.data = p.data * (1.0 - lr * state.weight_decay)
        p.data = p.data - lr * mhat / (np.sqrt(vhat) + state.eps)
        p.grad = None
