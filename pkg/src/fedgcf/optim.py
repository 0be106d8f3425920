"""Optimizers over flat lists of parameter arrays.

Both the graph model and the probability estimator expose their parameters as
ordered lists of float64 arrays, so one optimizer implementation serves both.
"""
from __future__ import annotations

import numpy as np

from .numerics import FloatArray

__all__ = ["sgd_step_arrays", "AdamState", "adam_step_arrays", "make_stepper"]


def sgd_step_arrays(params: list[FloatArray], grads: list[FloatArray], lr: float) -> None:
    """In-place params[i] -= lr * grads[i]."""
    if len(params) != len(grads):
        raise ValueError(f"got {len(params)} params but {len(grads)} grads")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch: param {p.shape} vs grad {g.shape}")
        p -= lr * g


class AdamState:
    """First/second moment buffers for one list of parameter arrays."""

    def __init__(self, params: list[FloatArray]):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0


def adam_step_arrays(
    params: list[FloatArray],
    grads: list[FloatArray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """One in-place Adam update (bias-corrected)."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimizer state disagree on length")
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * np.square(g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


def make_stepper(optimizer: str, params: list[FloatArray]):
    """Return step(params, grads, lr) closing over any optimizer state."""
    if optimizer == "sgd":
        return lambda ps, gs, lr: sgd_step_arrays(ps, gs, lr)
    if optimizer == "adam":
        state = AdamState(params)
        return lambda ps, gs, lr: adam_step_arrays(ps, gs, state, lr)
    raise ValueError(f"unknown optimizer {optimizer!r} (expected 'sgd' or 'adam')")
