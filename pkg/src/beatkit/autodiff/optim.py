"""AdamW with decoupled weight decay and a cosine-annealed learning rate."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass
class OptimizerState:
    lr_max: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: OptimizerState,
    lr: float,
    fixed: Mapping[str, np.ndarray] | None = None,
) -> tuple[dict[str, np.ndarray], OptimizerState]:
    """One AdamW update. Returns new parameter arrays; ``state`` is advanced in place.

    ``fixed`` maps parameter names to boolean masks of entries that must not move.
    A non-finite gradient aborts the step before anything is modified.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradientError(f"non-finite gradient for {name!r} at step {state.step + 1}")
        if np.shape(g) != np.shape(params[name]):
            raise ValueError(f"gradient shape {np.shape(g)} != parameter shape for {name!r}")
    fixed = fixed or {}
    beta1, beta2 = state.betas
    state.step += 1
    t = state.step
    bc1 = 1 - beta1**t
    bc2 = 1 - beta2**t
    new = {}
    for name, p in params.items():
        p = np.asarray(p, dtype=float)
        g = grads.get(name)
        if g is None:
            new[name] = p.copy()
            continue
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v
        updated = p * (1 - lr * state.weight_decay)
        updated = updated - lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
        mask = fixed.get(name)
        if mask is not None:
            updated = np.where(mask, p, updated)
        new[name] = updated
    return new, state


def cosine_lr(step: int, total_steps: int, lr_max: float = 5e-4, lr_min: float = 0.0) -> float:
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    return lr_min + 0.5 * (lr_max - lr_min) * (1 + math.cos(math.pi * step / total_steps))
