"""Dense numerical primitives with hand-derived gradients.

All arrays are float64 numpy arrays. Row-wise operations (layer norm,
softmax) act on the last axis so the same code serves single vectors and
n x d matrices.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import (
    DegenerateVectorError,
    EmptyInputError,
    EvaluationError,
    ParameterError,
    ShapeError,
)

PROB_CLAMP = 1e-7
_EXP_LIMIT = 500.0


def as_matrix(x) -> np.ndarray:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


# ---------------------------------------------------------------------------
# matmul
# ---------------------------------------------------------------------------


def _fixed_order_product(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    # Accumulate over the inner index in ascending order. Each output element
    # sees the same sequence of roundings no matter how rows are grouped.
    out = np.zeros((a.shape[0], b.shape[1]))
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[k]
    return out


def matmul(a, b, partitions: int = 1) -> np.ndarray:
    """Matrix product, optionally split into ``partitions`` row blocks.

    The result is bit-identical for every partition count.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply shapes {a.shape} and {b.shape}")
    if partitions < 1:
        raise ParameterError(f"partitions must be >= 1, got {partitions}")
    p = min(partitions, max(a.shape[0], 1))
    if p == 1:
        return _fixed_order_product(a, b)
    blocks = np.array_split(a, p, axis=0)
    with ThreadPoolExecutor(max_workers=p) as pool:
        parts = list(pool.map(lambda blk: _fixed_order_product(blk, b), blocks))
    return np.concatenate(parts, axis=0)


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def sigmoid(x) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), -_EXP_LIMIT, _EXP_LIMIT)
    return 1.0 / (1.0 + np.exp(-x))


def sigmoid_grad(y) -> np.ndarray:
    """Derivative of the logistic function expressed through its output."""
    y = np.asarray(y, dtype=np.float64)
    return y * (1.0 - y)


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_grad(x) -> np.ndarray:
    return (np.asarray(x) > 0).astype(np.float64)


def logit(p, clamp: float = PROB_CLAMP) -> np.ndarray:
    p = np.clip(np.asarray(p, dtype=np.float64), clamp, 1.0 - clamp)
    return np.log(p) - np.log1p(-p)


# ---------------------------------------------------------------------------
# layer norm
# ---------------------------------------------------------------------------

LAYER_NORM_MODES = ("center", "printed")


def _ln_stats(x: np.ndarray, eps: float, mode: str):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    if mode == "center":
        s = (xc * xc).mean(axis=-1, keepdims=True)
    elif mode == "printed":
        # denominator uses the raw second moment, as the formula is printed
        s = (x * x).mean(axis=-1, keepdims=True)
    else:
        raise ParameterError(f"unknown layer norm mode {mode!r}")
    r = 1.0 / np.sqrt(s + eps)
    if mode == "center":
        const = np.ptp(x, axis=-1, keepdims=True) == 0.0
    else:
        const = np.zeros_like(r, dtype=bool)
    return xc, r, const


def layer_norm(x, gamma, beta, eps: float = 1e-5, mode: str = "center") -> np.ndarray:
    """Normalize along the last axis: ``gamma * (x - mean) / sqrt(var + eps) + beta``.

    In ``center`` mode a row with zero spread maps to ``beta`` exactly.
    ``printed`` mode divides by the uncentered second moment instead of the
    variance.
    """
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    beta = np.asarray(beta, dtype=np.float64)
    if x.shape[-1] == 0:
        raise EmptyInputError("layer_norm on an empty vector")
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(
            f"gamma/beta shapes {gamma.shape}/{beta.shape} do not match d={x.shape[-1]}"
        )
    if eps <= 0:
        raise ParameterError("eps must be positive")
    xc, r, const = _ln_stats(x, eps, mode)
    xh = np.where(const, 0.0, xc * r)
    return gamma * xh + beta


def layer_norm_backward(dy, x, gamma, eps: float = 1e-5, mode: str = "center"):
    """Return ``(dx, dgamma, dbeta)``; parameter gradients are summed over rows."""
    dy = np.asarray(dy, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    gamma = np.asarray(gamma, dtype=np.float64)
    d = x.shape[-1]
    xc, r, const = _ln_stats(x, eps, mode)
    xh = np.where(const, 0.0, xc * r)
    red = tuple(range(dy.ndim - 1))
    dgamma = (dy * xh).sum(axis=red)
    dbeta = dy.sum(axis=red)
    gh = dy * gamma
    if mode == "center":
        dx = r / d * (
            d * gh
            - gh.sum(axis=-1, keepdims=True)
            - xh * (gh * xh).sum(axis=-1, keepdims=True)
        )
    else:
        dx = r * (gh - gh.mean(axis=-1, keepdims=True)) - (r**3) * x / d * (
            gh * xc
        ).sum(axis=-1, keepdims=True)
    dx = np.where(const, 0.0, dx)
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# softmax / cosine
# ---------------------------------------------------------------------------


def softmax_temp(s, tau: float = 1.0) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if tau <= 0:
        raise ParameterError(f"temperature must be positive, got {tau}")
    if s.size == 0 or s.shape[-1] == 0:
        raise EmptyInputError("softmax of an empty vector")
    z = s / tau
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"cosine of mismatched shapes {a.shape} and {b.shape}")
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    c = float(a @ b) / (na * nb)
    return min(1.0, max(-1.0, c))


def cosine_grad(a, b):
    """Gradients of ``cos(a, b)`` with respect to ``a`` and ``b``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DegenerateVectorError("cosine similarity of a zero-norm vector")
    c = float(a @ b) / (na * nb)
    da = b / (na * nb) - c * a / (na * na)
    db = a / (na * nb) - c * b / (nb * nb)
    return da, db


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _check_pair(pred, label):
    pred = np.asarray(pred, dtype=np.float64).ravel()
    label = np.asarray(label, dtype=np.float64).ravel()
    if pred.shape != label.shape:
        raise ShapeError(f"prediction length {pred.size} != label length {label.size}")
    if pred.size == 0:
        raise EmptyInputError("loss over zero samples")
    return pred, label


def bce_loss(pred, label) -> float:
    """Mean binary cross-entropy with predictions clamped to [1e-7, 1-1e-7]."""
    pred, label = _check_pair(pred, label)
    p = np.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    return float(-np.mean(label * np.log(p) + (1.0 - label) * np.log(1.0 - p)))


def bce_grad(pred, label) -> np.ndarray:
    pred, label = _check_pair(pred, label)
    inside = (pred >= PROB_CLAMP) & (pred <= 1.0 - PROB_CLAMP)
    p = np.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    g = -(label / p - (1.0 - label) / (1.0 - p)) / pred.size
    return np.where(inside, g, 0.0)


def _kl_parts(teacher_logits, student_logits, temp):
    if temp <= 0:
        raise ParameterError(f"temperature must be positive, got {temp}")
    z = as_matrix(teacher_logits)
    zh = as_matrix(student_logits)
    if z.shape != zh.shape:
        raise ShapeError(f"teacher logits {z.shape} vs student logits {zh.shape}")
    if z.shape[1] < 2:
        raise ShapeError("soft loss needs at least two classes")
    p = softmax_temp(z, temp)
    q = softmax_temp(zh, temp)
    return p, q, z, zh


def _log_softmax(z: np.ndarray, temp: float) -> np.ndarray:
    u = z / temp
    u = u - u.max(axis=1, keepdims=True)
    return u - np.log(np.exp(u).sum(axis=1, keepdims=True))


def kl_soft_loss(teacher_logits, student_logits, temp: float) -> float:
    """Sum over rows of KL(softmax(z/T) || softmax(z_hat/T))."""
    p, q, z, zh = _kl_parts(teacher_logits, student_logits, temp)
    kl = (p * (_log_softmax(z, temp) - _log_softmax(zh, temp))).sum()
    return max(float(kl), 0.0)


def kl_soft_grad(teacher_logits, student_logits, temp: float) -> np.ndarray:
    """Gradient of :func:`kl_soft_loss` with respect to the student logits."""
    p, q, _, _ = _kl_parts(teacher_logits, student_logits, temp)
    return (q - p) / temp


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradCheckReport:
    max_relative_error: float
    worst_index: tuple
    analytic: float
    numeric: float

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_relative_error < tol


def numeric_grad(fn: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=np.float64, copy=True)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + h
        fp = float(fn(x))
        x[idx] = orig - h
        fm = float(fn(x))
        x[idx] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise EvaluationError(f"non-finite function value near index {idx}")
        g[idx] = (fp - fm) / (2.0 * h)
    return g


def finite_diff_check(
    fn: Callable[[np.ndarray], float], x, analytic_grad, h: float = 1e-5
) -> GradCheckReport:
    """Compare an analytic gradient with central differences coordinate-wise."""
    if h <= 0:
        raise ParameterError("step size must be positive")
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if analytic.shape != x.shape:
        raise ShapeError(f"gradient shape {analytic.shape} != input shape {x.shape}")
    num = numeric_grad(fn, x, h)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(num)), 1e-8)
    rel = np.abs(analytic - num) / denom
    if rel.size == 0:
        return GradCheckReport(0.0, (), 0.0, 0.0)
    worst = np.unravel_index(int(np.argmax(rel)), rel.shape)
    return GradCheckReport(
        float(rel[worst]), tuple(int(i) for i in worst), float(analytic[worst]), float(num[worst])
    )
