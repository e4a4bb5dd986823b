"""Decoupled-weight-decay Adam and the annealed loss-weight schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import GradientError, Tensor


@dataclass
class OptimState:
    """Per-parameter moment accumulators plus the update hyperparameters."""

    lr: float = 6e-4
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params, lr: float = 6e-4, weight_decay: float = 0.01) -> "OptimState":
        state = cls(lr=lr, weight_decay=weight_decay)
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
        return state


def adamw_step(params, state: OptimState) -> None:
    """One AdamW update with bias correction; gradients are zeroed afterward.

    Weight decay is decoupled: it scales the parameter directly rather than
    entering the moment estimates.
    """
    if len(state.m) != len(params):
        raise GradientError(
            f"optimizer state covers {len(state.m)} params, got {len(params)}"
        )
    for i, p in enumerate(params):
        if p.grad is None:
            raise GradientError(f"missing gradient on parameter {i} (shape {p.shape})")
        if p.grad.shape != p.data.shape:
            raise GradientError(f"gradient shape {p.grad.shape} != param shape {p.data.shape}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for p, m, v in zip(params, state.m, state.v):
        g = p.grad
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        mhat = m / bc1
        vhat = v / bc2
        p.data -= state.lr * (mhat / (np.sqrt(vhat) + state.eps) + state.weight_decay * p.data)
        g.fill(0.0)


def zero_grads(params) -> None:
    for p in params:
        p.zero_grad()


def clip_global_norm(params, max_norm: float) -> tuple[float, bool]:
    """Scale all gradients so their joint L2 norm is at most max_norm.

    Returns (pre-clip norm, whether clipping fired).
    """
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.dot(p.grad.reshape(-1), p.grad.reshape(-1)))
    norm = math.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return norm, False
    scale = max_norm / norm
    for p in params:
        if p.grad is not None:
            p.grad *= scale
    return norm, True


def cosine_alpha(e: int, total_epochs: int) -> float:
    """Annealed weight (1 − cos(e·π/E)) / 2, exact at its anchor points.

    Monotone non-decreasing from 0 at e=0 to 1 at e=E. The midpoint returns
    exactly 0.5 (cos(π/2) in float64 is not exactly zero, so the anchor is
    special-cased to the correctly rounded value).
    """
    if total_epochs < 1:
        raise ValueError(f"total epochs must be >= 1, got {total_epochs}")
    if not 0 <= e <= total_epochs:
        raise ValueError(f"epoch {e} outside [0, {total_epochs}]")
    if e == 0:
        return 0.0
    if e == total_epochs:
        return 1.0
    if 2 * e == total_epochs:
        return 0.5
    return (1.0 - math.cos(e * math.pi / total_epochs)) / 2.0
