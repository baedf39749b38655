"""Classification, distillation and combined losses on batched logits.

All losses average over the batch.  A 1-D logits tensor is treated as a batch
of one.
"""
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor


@dataclass
class LossConfig:
    alpha: float = 0.5
    temperature: float = 2.0
    # apply L_KD and L_CL on replayed exemplars too, not only on current-task samples
    distill_on_replay: bool = True
    # multiply L_KD by t^2 so its gradient scale does not shrink with the temperature
    kd_t2: bool = False

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")


def softmax_temperature(logits, t=1.0):
    """Numerically stable softmax of ``logits / t`` along the last axis."""
    if t <= 0:
        raise ValueError(f"temperature must be positive, got {t}")
    z = np.asarray(logits, dtype=np.float64) / t
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    return float(-(p * np.log(np.where(p > 0, p, 1.0))).sum(axis=-1).mean())


def _batched(x):
    if x.ndim == 1:
        return ag.reshape(x, (1, x.shape[0]))
    return x


def ce_loss(logits, labels):
    """Mean of -log softmax(logits)[label]."""
    logits = _batched(logits if isinstance(logits, Tensor) else Tensor(logits))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise ValueError(f"label out of range for {c} logits: {labels.min()}..{labels.max()}")
    onehot = np.zeros((n, c), dtype=logits.dtype)
    onehot[np.arange(n), labels] = 1
    picked = ag.mul(ag.log_softmax(logits), Tensor(onehot, dtype=logits.dtype))
    return ag.scale(ag.tsum(picked), -1.0 / n)


def kd_loss(teacher_logits, student_logits, t):
    """Soft cross-entropy -sum P_T log P_S at temperature ``t``.

    The teacher side is a constant (array or tensor, never differentiated).
    This equals KL(P_T || P_S) + H(P_T).  No t^2 rescaling is applied.
    """
    if t <= 0:
        raise ValueError(f"temperature must be positive, got {t}")
    student = _batched(student_logits if isinstance(student_logits, Tensor) else Tensor(student_logits))
    teacher = teacher_logits.data if isinstance(teacher_logits, Tensor) else np.asarray(teacher_logits)
    teacher = np.atleast_2d(teacher)
    if teacher.shape != student.shape:
        raise ValueError(f"kd_loss: teacher shape {teacher.shape} != student shape {student.shape}")
    n = student.shape[0]
    p_t = softmax_temperature(teacher, t).astype(student.dtype)
    log_p_s = ag.log_softmax(ag.scale(student, 1.0 / t))
    return ag.scale(ag.tsum(ag.mul(log_p_s, Tensor(p_t, dtype=student.dtype))), -1.0 / n)


def stable_loss(ce, kd, cl, alpha):
    """alpha * ce + (1 - alpha) * kd + cl.  Terms may be tensors or plain numbers."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    total = None
    for coef, term in ((alpha, ce), (1.0 - alpha, kd), (1.0, cl)):
        if term is None or coef == 0.0:
            continue
        if isinstance(term, Tensor):
            value = term if coef == 1.0 else ag.scale(term, coef)
        else:
            value = coef * float(term)
        total = value if total is None else total + value
    return 0.0 if total is None else total
