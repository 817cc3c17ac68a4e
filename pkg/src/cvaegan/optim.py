"""Adam and the step-decay learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, state: AdamState, lr: float) -> AdamState:
    """Apply one bias-corrected Adam update in place, reading ``p.grad``.

    ``params`` maps names to tensors; moment buffers are keyed by the same
    names.
    """
    if lr <= 0:
        raise ContractError(f"learning rate must be positive, got {lr}")
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name!r} has no gradient")
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad.astype(p.dtype, copy=False)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        step = (lr / c1) * m / (np.sqrt(v / c2) + state.eps)
        p.data -= step.astype(p.dtype, copy=False)
    return state


@dataclass(frozen=True)
class Schedule:
    base_lr: float
    decay_factor: float = 0.2
    decay_every: int = 25


def lr_at(schedule: Schedule, epoch: int) -> float:
    """Learning rate for a zero-based epoch index; decays at multiples of ``decay_every``."""
    if epoch < 0:
        raise ContractError(f"epoch must be non-negative, got {epoch}")
    return schedule.base_lr * schedule.decay_factor ** (epoch // schedule.decay_every)
