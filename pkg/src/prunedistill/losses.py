"""Training objectives: cross-entropy and temperature-scaled distillation.

Teacher probabilities enter as plain arrays (they are fixed targets), so
gradients only ever flow into the student logits.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from prunedistill import autodiff as ad
from prunedistill.autodiff import Tensor
from prunedistill.errors import ParameterError, ShapeError

P_FLOOR = 1e-12
PROB_ATOL = 1e-9


def _labels(labels, n: int, m: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or len(y) != n:
        raise ShapeError(f"expected {n} labels, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise ParameterError("labels must be integers")
        y = y.astype(np.int64)
    if len(y) and (y.min() < 0 or y.max() >= m):
        raise ParameterError(f"labels must lie in [0, {m})")
    return y


def one_hot(labels, num_classes: int) -> np.ndarray:
    y = _labels(labels, len(np.asarray(labels)), num_classes)
    out = np.zeros((len(y), num_classes))
    out[np.arange(len(y)), y] = 1.0
    return out


def check_probs(probs: np.ndarray, shape: tuple[int, int] | None = None) -> np.ndarray:
    q = np.asarray(probs, dtype=np.float64)
    if q.ndim != 2:
        raise ShapeError(f"probability batch must be (N, M), got {q.shape}")
    if shape is not None and q.shape != shape:
        raise ShapeError(f"probability batch {q.shape} does not match logits {shape}")
    if np.any(q < 0) or np.any(q > 1) or np.any(np.abs(q.sum(axis=1) - 1.0) > PROB_ATOL):
        raise ParameterError("rows must be probability vectors")
    return q


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    n, m = logits.shape
    y = one_hot(_labels(labels, n, m), m)
    logp = ad.log_softmax_with_temperature(logits, 1.0)
    return ad.scale(ad.sum(ad.mul(logp, y)), -1.0 / n)


def _plogq(q: np.ndarray) -> float:
    # 0 * log 0 := 0
    pos = q > 0
    return float(np.sum(q[pos] * np.log(q[pos])))


def _student_logp(student_logits: Tensor, tau: float) -> Tensor:
    return ad.clamp_min(ad.log_softmax_with_temperature(student_logits, tau), np.log(P_FLOOR))


def kd_loss_single(student_logits: Tensor, teacher_probs, tau: float) -> Tensor:
    """``tau**2 * mean_n KL(q_n || p_n)`` with p the student softmax at ``tau``.

    ``teacher_probs`` must already be softened at the same temperature.
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    n = student_logits.shape[0]
    q = check_probs(teacher_probs, student_logits.shape)
    logp = _student_logp(student_logits, tau)
    const = _plogq(q)
    cross = ad.sum(ad.mul(logp, q))
    return ad.scale(ad.sub(ad.Tensor(const), cross), tau * tau / n)


def ensemble_average_probs(teacher_probs: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean of K probability batches."""
    if len(teacher_probs) == 0:
        raise ParameterError("need at least one teacher")
    qs = [check_probs(q) for q in teacher_probs]
    shape = qs[0].shape
    total = np.zeros(shape)
    for q in qs:
        if q.shape != shape:
            raise ShapeError(f"teacher batches disagree: {q.shape} vs {shape}")
        total += q
    return total / len(qs)


def kd_loss_mean_kl(student_logits: Tensor, teacher_probs: Sequence[np.ndarray], tau: float) -> Tensor:
    """Mean over teachers of the per-teacher distillation KL, times ``tau**2``.

    With a single teacher this performs exactly the arithmetic of
    :func:`kd_loss_single`.
    """
    if not tau > 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if len(teacher_probs) == 0:
        raise ParameterError("need at least one teacher")
    n = student_logits.shape[0]
    k = len(teacher_probs)
    qs = [check_probs(q, student_logits.shape) for q in teacher_probs]
    logp = _student_logp(student_logits, tau)
    const = 0.0
    qsum = qs[0]
    for i, q in enumerate(qs):
        const += _plogq(q)
        if i:
            qsum = qsum + q
    cross = ad.sum(ad.mul(logp, qsum))
    return ad.scale(ad.sub(ad.Tensor(const), cross), tau * tau / (k * n))


def kd_loss_avg_prob(student_logits: Tensor, teacher_probs: Sequence[np.ndarray], tau: float) -> Tensor:
    """Distillation against the averaged teacher distribution."""
    return kd_loss_single(student_logits, ensemble_average_probs(teacher_probs), tau)
