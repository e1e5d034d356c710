"""Finite-difference oracles for validating analytic backward passes.

Central differences in 64-bit precision at h = 1e-6 balance truncation
against rounding for loss values of magnitude ~1.  Comparison uses a
two-tolerance rule: an element passes if its relative error OR its absolute
error is within bound, which keeps near-zero gradient entries (where
relative error is meaningless) from producing false alarms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .grid import Grid3

DEFAULT_STEP = 1e-6
DEFAULT_REL_TOL = 1e-5
DEFAULT_ABS_TOL = 1e-8


class NonFiniteLossError(RuntimeError):
    """A probe evaluation returned NaN/Inf; carries the probe index."""

    def __init__(self, index, value):
        super().__init__(f"loss is non-finite ({value}) while probing index {index}")
        self.index = index
        self.value = value


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    max_abs_error: float
    worst_index: tuple[int, int, int]
    num_checked: int
    passed: bool

    def to_json_dict(self) -> dict:
        return {
            "max_rel_error": self.max_rel_error,
            "max_abs_error": self.max_abs_error,
            "worst_index": list(self.worst_index),
            "num_checked": self.num_checked,
            "passed": self.passed,
        }


def finite_difference_flat(
    loss_fn: Callable[[np.ndarray], float], x: np.ndarray, h: float = DEFAULT_STEP
) -> np.ndarray:
    """Central differences of a scalar function over a flat parameter array."""
    if h <= 0:
        raise ValueError(f"step size must be positive, got {h}")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros(x.shape)
    flat = grad.reshape(-1)
    for idx in range(x.size):
        probe = x.copy().reshape(-1)
        probe[idx] += h
        hi = float(loss_fn(probe.reshape(x.shape)))
        probe[idx] -= 2 * h
        lo = float(loss_fn(probe.reshape(x.shape)))
        if not (np.isfinite(hi) and np.isfinite(lo)):
            raise NonFiniteLossError(
                np.unravel_index(idx, x.shape), hi if not np.isfinite(hi) else lo
            )
        flat[idx] = (hi - lo) / (2 * h)
    return grad


def finite_difference_grad(
    loss_fn: Callable[[Grid3], float], pred: Grid3, h: float = DEFAULT_STEP
) -> Grid3:
    """Central-difference gradient of loss_fn at pred, probing every element.

    Costs 2*H*W*C loss evaluations; callers keep maps small (<= 8x8x4).
    """
    return Grid3(
        finite_difference_flat(lambda arr: loss_fn(Grid3(arr)), pred.data, h)
    )


def check_gradient(
    analytic: Grid3,
    numeric: Grid3,
    rel_tol: float = DEFAULT_REL_TOL,
    abs_tol: float = DEFAULT_ABS_TOL,
) -> GradCheckReport:
    """Element-wise comparison under the two-tolerance rule.

    Relative error uses the symmetric denominator max(|a|, |n|) so that
    swapping the arguments gives an identical verdict.  worst_index points
    at the element that most violates the rule (largest min of the two
    tolerance ratios).
    """
    if analytic.shape != numeric.shape:
        raise ValueError(
            f"gradient shapes differ: {analytic.shape} vs {numeric.shape}"
        )
    a = analytic.data
    n = numeric.data
    abs_err = np.abs(a - n)
    denom = np.maximum(np.abs(a), np.abs(n))
    rel_err = np.where(denom > 0, abs_err / np.where(denom > 0, denom, 1.0), 0.0)

    ok = (rel_err < rel_tol) | (abs_err < abs_tol)
    violation = np.minimum(rel_err / rel_tol, abs_err / abs_tol)
    worst = np.unravel_index(int(np.argmax(violation)), a.shape)
    return GradCheckReport(
        max_rel_error=float(rel_err.max()),
        max_abs_error=float(abs_err.max()),
        worst_index=tuple(int(i) for i in worst),
        num_checked=a.size,
        passed=bool(ok.all()),
    )
