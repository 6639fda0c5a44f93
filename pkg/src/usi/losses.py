"""Distillation objective: temperature softmax, CE, tau^2-scaled KL and their sum."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import DomainError, ShapeError, Tensor, _make, as_tensor, log_softmax, softmax

INF = math.inf
LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class ClassSpec:
    num_classes: int

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.num_classes}")


@dataclass(frozen=True)
class KDWeights:
    """``alpha_kd`` may be ``math.inf``: KL only, the CE term is dropped entirely."""

    alpha_kd: float = 5.0
    temperature: float = 1.0

    def __post_init__(self):
        if math.isnan(self.alpha_kd) or self.alpha_kd < 0:
            raise ValueError(f"alpha_kd must be >= 0 or inf, got {self.alpha_kd}")
        if not self.temperature > 0:
            raise DomainError(f"temperature must be > 0, got {self.temperature}")

    @property
    def kl_only(self) -> bool:
        return math.isinf(self.alpha_kd)


@dataclass
class LossBreakdown:
    total: Tensor
    ce: float | None
    kl: float | None


def _check_tau(tau: float) -> None:
    if not tau > 0:
        raise DomainError(f"temperature must be > 0, got {tau}")


def softmax_temperature(z: Tensor, tau: float) -> Tensor:
    _check_tau(tau)
    z = as_tensor(z)
    return softmax(z * (1.0 / tau) if tau != 1.0 else z, axis=-1)


def log_softmax_temperature(z: Tensor, tau: float) -> Tensor:
    _check_tau(tau)
    z = as_tensor(z)
    return log_softmax(z * (1.0 / tau) if tau != 1.0 else z, axis=-1)


def cross_entropy(p: Tensor, y) -> Tensor:
    """Batch-mean of ``-sum_j y_j log p_j`` for probability rows ``p``.

    ``log p`` is floored at ``log(1e-12)`` so zero probabilities under a
    positive label give a large finite loss rather than inf/NaN.
    """
    p = as_tensor(p)
    yd = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    if p.shape != yd.shape:
        raise ShapeError(f"prediction {p.shape} vs labels {yd.shape}")
    pd = np.maximum(p.data, LOG_FLOOR)
    clamped = p.data < LOG_FLOOR
    b = pd.shape[0]
    val = -(yd * np.log(pd)).sum() / b

    def bw(g):
        return (np.where(clamped, 0.0, -g * yd / pd / b),)

    return _make(np.asarray(val), (p,), bw, "cross_entropy")


def cross_entropy_from_logits(z: Tensor, y) -> Tensor:
    """CE of ``softmax(z)`` against (soft) labels, through log-softmax."""
    yd = np.asarray(y.data if isinstance(y, Tensor) else y, dtype=np.float64)
    z = as_tensor(z)
    if z.shape != yd.shape:
        raise ShapeError(f"logits {z.shape} vs labels {yd.shape}")
    logp = log_softmax(z, axis=-1)
    floor = math.log(LOG_FLOOR)
    clamped = logp.data < floor
    b = z.shape[0]
    val = -(yd * np.maximum(logp.data, floor)).sum() / b
    return _make(np.asarray(val), (logp,), lambda g: (np.where(clamped, 0.0, -g * yd / b),), "ce_logits")


def kl_divergence_rows(p_t: np.ndarray, logp_t: np.ndarray, logp_s: np.ndarray) -> np.ndarray:
    """Per-row ``sum_j p_t log(p_t / p_s)`` without the temperature factor."""
    return (p_t * (logp_t - logp_s)).sum(axis=-1)


def kl_distill_loss(z_s: Tensor, z_t, tau: float) -> Tensor:
    """Batch-mean of ``tau^2 * KL(p_t(tau) || p_s(tau))``.

    Teacher logits are treated as constants; no gradient ever reaches them.
    """
    _check_tau(tau)
    z_s = as_tensor(z_s)
    zt = np.asarray(z_t.data if isinstance(z_t, Tensor) else z_t, dtype=np.float64)
    if z_s.shape != zt.shape:
        raise ShapeError(f"student {z_s.shape} vs teacher {zt.shape}")
    logp_t = log_softmax(Tensor(zt / tau), axis=-1).data
    p_t = np.exp(logp_t)
    logp_s = log_softmax_temperature(z_s, tau)
    b = zt.shape[0]
    t2 = tau * tau
    val = t2 * kl_divergence_rows(p_t, logp_t, logp_s.data).sum() / b
    return _make(np.asarray(val), (logp_s,), lambda g: (-g * t2 * p_t / b,), "kl_distill")


def usi_loss(z_s: Tensor, z_t, y, weights: KDWeights = KDWeights()) -> LossBreakdown:
    """``CE(p_s(1), y) + alpha_kd * KL``; alpha 0 is pure CE, alpha inf is pure KL."""
    if weights.kl_only:
        kl = kl_distill_loss(z_s, z_t, weights.temperature)
        return LossBreakdown(kl, None, kl.item())
    ce = cross_entropy_from_logits(z_s, y)
    if weights.alpha_kd == 0:
        return LossBreakdown(ce, ce.item(), None)
    kl = kl_distill_loss(z_s, z_t, weights.temperature)
    return LossBreakdown(ce + kl * weights.alpha_kd, ce.item(), kl.item())
