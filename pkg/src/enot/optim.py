"""Adam with per-network beta pairs and a cosine-annealed learning rate."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np


class ShapeMismatch(Exception):
    pass


class NonFiniteGradient(Exception):
    pass


class OutOfRangeStep(Exception):
    pass


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n_params: int, beta1: float = 0.9, beta2: float = 0.999,
             eps: float = 1e-8) -> "AdamState":
        if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
            raise ValueError("betas must lie in [0, 1)")
        return cls(np.zeros(n_params), np.zeros(n_params), 0, beta1, beta2, eps)


def adam_step(state: AdamState, params: np.ndarray, grads: np.ndarray,
              lr: float):
    """One bias-corrected Adam update; returns (new_params, new_state)."""
    params = np.asarray(params, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ShapeMismatch(
            f"params {params.shape}, grads {grads.shape}, state {state.m.shape}")
    if lr < 0.0:
        raise ValueError("lr must be >= 0")
    if not np.all(np.isfinite(grads)):
        raise NonFiniteGradient("non-finite entries in gradient")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - lr * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, m=m, v=v, step=t)


@dataclass(frozen=True)
class CosineSchedule:
    lr0: float
    lr_final: float
    total_steps: int

    def __post_init__(self):
        if self.lr0 <= 0.0:
            raise ValueError("lr0 must be positive")
        if self.lr_final < 0.0:
            raise ValueError("lr_final must be non-negative")
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")


def cosine_lr(schedule: CosineSchedule, t: int) -> float:
    """lr_final + (lr0 - lr_final) (1 + cos(pi t / T)) / 2."""
    if not 0 <= t <= schedule.total_steps:
        raise OutOfRangeStep(f"t={t} outside [0, {schedule.total_steps}]")
    frac = 0.5 * (1.0 + np.cos(np.pi * t / schedule.total_steps))
    return float(schedule.lr_final + (schedule.lr0 - schedule.lr_final) * frac)
