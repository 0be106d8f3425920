"""Minimal float64 numeric kernel: activations, checked matmul, gradient checking.

Everything downstream (model, value estimator) routes its elementwise math and
gradient certification through here so numeric conventions live in one place.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.typing import NDArray

FloatArray = NDArray[np.float64]

__all__ = [
    "FloatArray",
    "matmul",
    "sigmoid",
    "log_sigmoid",
    "leaky_relu",
    "leaky_relu_grad",
    "relu",
    "relu_grad",
    "grad_check",
]


def matmul(a: FloatArray, b: FloatArray) -> FloatArray:
    """Checked 2-D matrix product."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(f"matmul needs 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def sigmoid(x) -> FloatArray:
    """Numerically stable logistic function."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x) -> FloatArray:
    """log(sigmoid(x)) without overflow for large |x|."""
    x = np.asarray(x, dtype=np.float64)
    return -np.logaddexp(0.0, -x)


def leaky_relu(x, slope: float = 0.2) -> FloatArray:
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, x, slope * x)


def leaky_relu_grad(x, slope: float = 0.2) -> FloatArray:
    """Derivative of leaky_relu wrt its input; the kink at 0 takes the right limit."""
    x = np.asarray(x, dtype=np.float64)
    return np.where(x >= 0, 1.0, slope)


def relu(x) -> FloatArray:
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0)


def relu_grad(x) -> FloatArray:
    x = np.asarray(x, dtype=np.float64)
    return (x > 0).astype(np.float64)


def grad_check(
    f: Callable[[FloatArray], float],
    analytic_grad: FloatArray,
    point: FloatArray,
    eps: float = 1e-5,
) -> float:
    """Compare `analytic_grad` against central differences of `f` at `point`.

    Returns the max over coordinates of
    |central_diff - analytic| / max(1, |analytic|).
    All arithmetic is float64; `f` must be deterministic.
    """
    point = np.array(point, dtype=np.float64)
    analytic = np.asarray(analytic_grad, dtype=np.float64)
    if analytic.shape != point.shape:
        raise ValueError(
            f"gradient shape {analytic.shape} does not match point shape {point.shape}"
        )
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    worst = 0.0
    x = point.copy()
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + eps
        f_hi = float(f(x))
        x.flat[i] = orig - eps
        f_lo = float(f(x))
        x.flat[i] = orig
        if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
            raise FloatingPointError(
                f"objective non-finite when perturbing coordinate {i} "
                f"(f(+eps)={f_hi}, f(-eps)={f_lo})"
            )
        numeric = (f_hi - f_lo) / (2.0 * eps)
        err = abs(numeric - analytic.flat[i]) / max(1.0, abs(analytic.flat[i]))
        if err > worst:
            worst = err
    return worst
