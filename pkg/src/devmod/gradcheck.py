"""Central finite-difference verification of reverse-mode gradients."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .tensor import Tensor, backward

__all__ = ["GradCheckReport", "finite_diff_check", "numeric_gradient"]


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    ok: bool
    note: str = ""

    def __str__(self) -> str:
        state = "pass" if self.ok else "FAIL"
        msg = f"gradcheck {state}: max rel error {self.max_rel_error:.3e} (tol {self.tol:.1e})"
        return msg + (f" [{self.note}]" if self.note else "")


def numeric_gradient(f: Callable[[Tensor], Tensor], x: Tensor, h: float) -> np.ndarray:
    """Central differences of a tensor->scalar function, element by element."""
    base = x.data
    g = np.zeros_like(base)
    flat = g.reshape(-1)
    for i in range(base.size):
        bump = np.zeros_like(base).reshape(-1)
        bump[i] = h
        bump = bump.reshape(base.shape)
        hi = f(Tensor(base + bump)).item()
        lo = f(Tensor(base - bump)).item()
        flat[i] = (hi - lo) / (2.0 * h)
    return g


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor,
                      h: float = 1e-5, tol: float = 1e-4) -> GradCheckReport:
    """Compare the tape gradient of ``f`` at ``x`` against central differences.

    The error is max |analytic - numeric| normalized by the largest gradient
    magnitude, so small noisy components do not dominate. NaN anywhere in the
    evaluations is reported as a failure rather than raised.
    """
    if not (1e-7 <= h <= 1e-4):
        raise ValueError(f"h must lie in [1e-7, 1e-4], got {h}")
    probe = Tensor(x.data, requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ValueError("f must return a scalar tensor")
    if not math.isfinite(out.item()):
        return GradCheckReport(math.inf, tol, False, "non-finite function value")
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(probe.data)
    numeric = numeric_gradient(f, x, h)
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        return GradCheckReport(math.inf, tol, False, "non-finite gradient")
    scale = max(float(np.max(np.abs(analytic))), float(np.max(np.abs(numeric))), 1e-12)
    err = float(np.max(np.abs(analytic - numeric))) / scale
    return GradCheckReport(err, tol, err <= tol)
