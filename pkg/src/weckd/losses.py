"""Distillation loss machinery: temperature softmax, CE, KL, hybrid objective, annealing."""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .tensor import ContractError

__all__ = [
    "DistillParams",
    "softmax_temperature",
    "ce_loss",
    "kd_loss",
    "hybrid_loss",
    "hybrid_loss_grad",
    "anneal_temperature",
]


@dataclass(frozen=True)
class DistillParams:
    alpha: float = 0.7
    t_max: float = 4.0
    t_min: float = 1.0
    # classical KD multiplies the KL gradient by T^2; the hybrid objective
    # here does not, so the flag defaults off (ablation knob only)
    t_squared_compensation: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError(f"alpha must be in [0,1], got {self.alpha}")
        if self.t_min < 1.0:
            raise ContractError(f"t_min must be >= 1, got {self.t_min}")
        if self.t_max > 10.0:
            raise ContractError(f"t_max must be <= 10, got {self.t_max}")
        if self.t_max < self.t_min:
            raise ContractError(f"t_max {self.t_max} below t_min {self.t_min}")


def softmax_temperature(z, temp):
    """Row-wise softmax of z/temp with max-subtraction for stability."""
    if temp <= 0:
        raise ContractError(f"temperature must be positive, got {temp}")
    z = np.asarray(z, dtype=np.float64) / temp
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _check_one_hot(y):
    y = np.asarray(y, dtype=np.float64)
    if not (np.all((y == 0.0) | (y == 1.0)) and np.allclose(y.sum(axis=-1), 1.0)):
        raise ContractError("labels must be one-hot rows")
    return y


def ce_loss(p, y_onehot):
    """Mean cross-entropy of probability rows against one-hot labels."""
    y = _check_one_hot(y_onehot)
    p = np.asarray(p, dtype=np.float64)
    return float(-(y * np.log(np.maximum(p, 1e-12))).sum(axis=-1).mean())


def kd_loss(z_student, z_teacher, temp):
    """Mean KL(teacher || student), both softened at `temp`."""
    z_student = np.asarray(z_student, dtype=np.float64)
    z_teacher = np.asarray(z_teacher, dtype=np.float64)
    if z_student.shape != z_teacher.shape:
        raise ContractError(
            f"student logits {z_student.shape} and teacher logits {z_teacher.shape} disagree"
        )
    pt = softmax_temperature(z_teacher, temp)
    ps = softmax_temperature(z_student, temp)
    kl = (pt * (np.log(np.maximum(pt, 1e-12)) - np.log(np.maximum(ps, 1e-12)))).sum(axis=-1)
    return float(kl.mean())


def hybrid_loss(z_student, z_teacher, y_onehot, alpha, temp):
    """alpha * CE(student at T=1, y) + (1-alpha) * KL(teacher_T || student_T).

    Returns (total, ce_part, kd_part).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must be in [0,1], got {alpha}")
    ce = ce_loss(softmax_temperature(z_student, 1.0), y_onehot)
    kd = kd_loss(z_student, z_teacher, temp)
    return alpha * ce + (1.0 - alpha) * kd, ce, kd


def hybrid_loss_grad(z_student, z_teacher, y_onehot, alpha, temp,
                     t_squared_compensation=False):
    """Closed-form d(hybrid)/d(student logits), shape (B, K)."""
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must be in [0,1], got {alpha}")
    y = _check_one_hot(y_onehot)
    z_student = np.asarray(z_student, dtype=np.float64)
    z_teacher = np.asarray(z_teacher, dtype=np.float64)
    if z_student.shape != z_teacher.shape:
        raise ContractError(
            f"student logits {z_student.shape} and teacher logits {z_teacher.shape} disagree"
        )
    B = z_student.shape[0]
    ps = softmax_temperature(z_student, 1.0)
    g = alpha * (ps - y) / B
    if alpha < 1.0:
        ps_t = softmax_temperature(z_student, temp)
        pt_t = softmax_temperature(z_teacher, temp)
        kd_scale = temp if t_squared_compensation else (1.0 / temp)
        g = g + (1.0 - alpha) * kd_scale * (ps_t - pt_t) / B
    return g


def anneal_temperature(epoch, total_epochs, t_max, t_min):
    """Linear schedule T(e) = t_max - (t_max - t_min) * e / total_epochs."""
    if total_epochs < 1:
        raise ContractError(f"total_epochs must be >= 1, got {total_epochs}")
    if epoch < 0:
        raise ContractError(f"epoch must be >= 0, got {epoch}")
    if epoch > total_epochs:
        warnings.warn(
            f"epoch {epoch} beyond schedule end {total_epochs}; clamping to t_min",
            stacklevel=2,
        )
        return float(t_min)
    # lerp form so both endpoints are exact in floating point
    frac = epoch / total_epochs
    return float(t_max * (1.0 - frac) + t_min * frac)
