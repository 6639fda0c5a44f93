"""AdamW with decoupled weight decay and a one-cycle learning-rate policy."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class AdamWState:
    lr: float = 2e-3
    weight_decay: float = 2e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, Tensor], state: AdamWState, lr_now: float | None = None) -> None:
    """One in-place AdamW update of every parameter that has a gradient.

    The decay term ``lr * wd * w`` acts on the weights directly and never
    passes through the moment estimates.
    """
    lr = state.lr if lr_now is None else lr_now
    if not lr > 0:
        raise ValueError(f"learning rate must be > 0, got {lr}")
    for name, p in params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            bad = int(np.size(p.grad) - np.isfinite(p.grad).sum())
            raise FloatingPointError(f"non-finite gradient in {name!r} ({bad} entries) at step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= lr * (update + state.weight_decay * p.data)


@dataclass(frozen=True)
class OneCycleSchedule:
    max_lr: float = 2e-3
    total_steps: int = 1000
    warmup_fraction: float = 0.1
    div_factor: float = 25.0
    final_div_factor: float = 1e4

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.div_factor <= 1 or self.final_div_factor <= 1:
            raise ValueError("div factors must exceed 1")

    @property
    def warmup_steps(self) -> int:
        """Index of the peak step."""
        if self.total_steps < 3:
            return 0
        return min(max(1, int(round(self.warmup_fraction * self.total_steps))), self.total_steps - 2)

    @property
    def start_lr(self) -> float:
        return self.max_lr / self.div_factor

    @property
    def final_lr(self) -> float:
        return self.max_lr / self.final_div_factor


def one_cycle_lr(step: int, sched: OneCycleSchedule) -> float:
    """Linear ramp from ``max/div`` to ``max``, then cosine anneal to ``max/final_div``."""
    if not 0 <= step < sched.total_steps:
        raise IndexError(f"step {step} outside [0, {sched.total_steps})")
    peak = sched.warmup_steps
    if step <= peak:
        if peak == 0:
            return sched.max_lr
        t = step / peak
        return sched.start_lr * (1.0 - t) + sched.max_lr * t
    span = sched.total_steps - 1 - peak
    c = 0.5 * (1.0 + math.cos(math.pi * (step - peak) / span))
    return sched.final_lr * (1.0 - c) + sched.max_lr * c


def lr_trace(sched: OneCycleSchedule) -> list[float]:
    return [one_cycle_lr(s, sched) for s in range(sched.total_steps)]
