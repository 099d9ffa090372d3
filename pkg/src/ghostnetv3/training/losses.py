"""Cross-entropy and knowledge-distillation losses with their logit gradients."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..nn import backward_softmax_ce, softmax_ce
from ..tensor import DTYPE, ShapeError, log_softmax, softmax


@dataclass
class KDConfig:
    """Distillation settings.

    ``teacher`` is ``"model"`` (a live teacher model is passed to the loop),
    ``"file"`` (precomputed logits, see :mod:`ghostnetv3.harness.io`) or
    ``"none"``. ``literal`` switches to the probabilities-divided-by-tau
    reading of the loss and exists for debugging only.
    """

    alpha: float = 0.0
    temperature: float = 1.0
    teacher: str = "none"
    teacher_path: Optional[str] = None
    literal: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.teacher not in ("none", "model", "file"):
            raise ValueError(f"unknown teacher source {self.teacher!r}")


def cross_entropy(logits: np.ndarray, label) -> float:
    """Batch-mean cross-entropy; ``label`` holds class ids or soft targets."""
    logits = np.atleast_2d(logits)
    return softmax_ce(logits, np.atleast_1d(label) if np.ndim(label) < 2 else label)


def cross_entropy_grad(logits: np.ndarray, label) -> np.ndarray:
    return backward_softmax_ce(np.atleast_2d(logits), label)


def _check_kd(student, teacher, tau):
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    student, teacher = np.atleast_2d(student), np.atleast_2d(teacher)
    if student.shape != teacher.shape:
        raise ShapeError(f"student logits {student.shape} vs teacher {teacher.shape}")
    return student.astype(np.float64), teacher.astype(np.float64)


def kd_loss(student_logits: np.ndarray, teacher_logits: np.ndarray, tau: float) -> float:
    """tau^2 * KL(p_teacher || p_student) with p = softmax(logits / tau), batch mean.

    Always >= 0 and zero exactly when the softened distributions agree.
    """
    s, t = _check_kd(student_logits, teacher_logits, tau)
    log_ps = log_softmax(s / tau, axis=1)
    log_pt = log_softmax(t / tau, axis=1)
    kl = (np.exp(log_pt) * (log_pt - log_ps)).sum(axis=1)
    return float(tau * tau * np.maximum(kl, 0.0).mean())


def kd_loss_grad(student_logits: np.ndarray, teacher_logits: np.ndarray, tau: float) -> np.ndarray:
    """Gradient of :func:`kd_loss` w.r.t. the student logits: tau * (p_s - p_t) / batch."""
    s, t = _check_kd(student_logits, teacher_logits, tau)
    ps, pt = softmax(s / tau, axis=1), softmax(t / tau, axis=1)
    return (tau * (ps - pt) / s.shape[0]).astype(DTYPE)


def kd_loss_literal(student_logits: np.ndarray, teacher_logits: np.ndarray, tau: float) -> float:
    """Debug variant: KL(softmax(s)/tau, softmax(t)/tau) * tau^2, student as first argument.

    The scaled vectors are not distributions; this only exists to compare
    against the standard form.
    """
    s, t = _check_kd(student_logits, teacher_logits, tau)
    a, b = softmax(s, axis=1) / tau, softmax(t, axis=1) / tau
    return float(tau * tau * (a * (np.log(a) - np.log(b))).sum(axis=1).mean())


def total_loss(ce: float, kd: float, alpha: float) -> float:
    """(1 - alpha) * ce + alpha * kd."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return ce
    if alpha == 1.0:
        return kd
    return (1.0 - alpha) * ce + alpha * kd
