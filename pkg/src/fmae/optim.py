"""Adam and the warmup + cosine learning-rate schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, MutableMapping

import numpy as np

from .errors import ContractError, TrainingDivergenceError


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: MutableMapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float):
    """One bias-corrected Adam update, in place. Returns ``(params, state)``.

    Parameters without an entry in ``grads`` are treated as having zero
    gradient (their moments still decay).
    """
    if lr < 0:
        raise ContractError("learning rate must be non-negative")
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(f"non-finite gradient for parameter {name!r}", name=name)
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if lr == 0.0:
            continue
        update = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p -= update.astype(p.dtype, copy=False)
    return params, state


@dataclass(frozen=True)
class LRSchedule:
    peak: float = 1.5e-4
    warmup_epochs: int = 40
    total_epochs: int = 800
    steps_per_epoch: int = 1

    def __post_init__(self):
        if self.peak <= 0:
            raise ContractError("peak learning rate must be positive")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ContractError("need 0 <= warmup_epochs < total_epochs")
        if self.steps_per_epoch < 1:
            raise ContractError("steps_per_epoch must be positive")

    @property
    def warmup_steps(self) -> int:
        return self.warmup_epochs * self.steps_per_epoch

    @property
    def total_steps(self) -> int:
        return self.total_epochs * self.steps_per_epoch


def lr_at(step: int, sched: LRSchedule) -> float:
    """Linear warmup from 0 to ``peak``, then cosine decay to 0 at the last step."""
    total, warm = sched.total_steps, sched.warmup_steps
    if not 0 <= step <= total:
        raise ContractError(f"step {step} outside [0, {total}]")
    if step < warm:
        return sched.peak * step / warm
    progress = (step - warm) / (total - warm)
    return sched.peak * 0.5 * (1.0 + math.cos(math.pi * progress))
