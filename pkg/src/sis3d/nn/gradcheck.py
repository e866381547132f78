"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    per_param: list = field(default_factory=list)

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance


def numeric_grad(fn, param, h=1e-5):
    """Central differences of scalar ``fn()`` with respect to ``param.data``."""
    grad = np.zeros_like(param.data, dtype=np.float64)
    flat = param.data.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = float(fn().data)
        flat[i] = orig - h
        down = float(fn().data)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return grad


def grad_check(fn, params, h=1e-5, tolerance=1e-4):
    """Compare analytic and central-difference gradients of scalar ``fn``.

    The error for each parameter is ``max|analytic - numeric|`` scaled by the
    larger of the two gradients' max magnitudes (floored at 1e-12 so an
    all-zero gradient pair counts as exact).
    """
    for p in params:
        p.grad = None
    out = fn()
    out.backward()
    analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]
    report = GradCheckReport(0.0, tolerance)
    for p, a in zip(params, analytic):
        n = numeric_grad(fn, p, h)
        scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
        err = float(np.abs(a - n).max(initial=0.0) / scale)
        report.per_param.append(err)
        report.max_rel_error = max(report.max_rel_error, err)
    return report


def as_param(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)
