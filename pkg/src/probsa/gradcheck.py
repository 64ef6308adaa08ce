"""Central finite-difference checks for the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad


def numeric_grad(fn: Callable[[], float], params: Sequence[ad.Tensor], h: float = 1e-5) -> list[np.ndarray]:
    """Central differences of a scalar function of the parameters' ``data`` (perturbed in place)."""
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = fn()
            flat[i] = orig - h
            down = fn()
            flat[i] = orig
            gflat[i] = (up - down) / (2.0 * h)
        out.append(g)
    return out


def max_relative_error(analytic: Sequence[np.ndarray], numeric: Sequence[np.ndarray],
                       floor: float = 1e-6) -> float:
    """max |a - n| / max(|a|, |n|, floor) over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        if a.size:
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def check(loss_fn: Callable[[], ad.Tensor], params: Sequence[ad.Tensor], h: float = 1e-5,
          floor: float = 1e-6) -> float:
    """Max relative error between backward gradients and central differences."""
    params = list(params)
    analytic = ad.grad(loss_fn(), params)

    def value():
        with ad.no_grad():
            return float(loss_fn().data)

    return max_relative_error(analytic, numeric_grad(value, params, h), floor)
