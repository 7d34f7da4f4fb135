"""Central finite-difference checks of tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .engine import Tape, Tensor


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    degenerate: list[tuple[int, int]] = field(default_factory=list)

    def __float__(self):
        return self.max_rel_error


def _scalar(value) -> float:
    arr = value.data if isinstance(value, Tensor) else np.asarray(value, dtype=float)
    if arr.size != 1:
        raise ValueError(f"function must be scalar-valued, got shape {arr.shape}")
    return float(arr.reshape(-1)[0])


def grad_check(
    f: Callable[..., Tensor],
    x: Tensor | Sequence[Tensor],
    h: float = 1e-5,
    kink_tol: float = 1e-3,
    coords: dict[int, Sequence[int]] | None = None,
) -> GradCheckResult:
    """Compare the analytic gradient of ``f`` with central differences.

    ``f`` receives the tensor(s) in ``x`` and returns a scalar tensor. Coordinates where
    the one-sided slopes disagree by more than ``kink_tol`` (relative) sit on a kink,
    such as a min/max tie; they are reported in ``degenerate`` and excluded.
    ``coords`` optionally restricts the check to given flat indices per input.
    """
    xs = [x] if isinstance(x, Tensor) else list(x)
    for t in xs:
        t.requires_grad = True
        t.data = np.ascontiguousarray(t.data)
    with Tape() as tape:
        out = f(*xs)
    _scalar(out)
    grads = tape.backward(out)
    analytic = [np.array(grads[t], dtype=float).reshape(-1) for t in xs]

    f0 = _scalar(f(*xs))
    worst = 0.0
    checked = 0
    degenerate = []
    for which, t in enumerate(xs):
        flat = t.data.reshape(-1)
        indices = range(flat.size) if coords is None else coords.get(which, ())
        for i in indices:
            orig = flat[i]
            flat[i] = orig + h
            fp = _scalar(f(*xs))
            flat[i] = orig - h
            fm = _scalar(f(*xs))
            flat[i] = orig
            right = (fp - f0) / h
            left = (f0 - fm) / h
            if abs(right - left) > kink_tol * (abs(right) + abs(left)) + 1e-7:
                degenerate.append((which, i))
                continue
            numeric = (fp - fm) / (2 * h)
            a = analytic[which][i]
            rel = abs(a - numeric) / (abs(a) + abs(numeric) + 1e-12)
            worst = max(worst, rel)
            checked += 1
    return GradCheckResult(worst, checked, degenerate)
