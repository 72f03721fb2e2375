"""Central finite-difference gradient checks against the autodiff engine."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float = 1e-5) -> np.ndarray:
    """d f()/d x by central differences; ``f`` must read ``x.data`` on each call."""
    g = np.zeros_like(x.data)
    flat = x.data.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f().item()
        flat[i] = old - h
        fm = f().item()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max absolute deviation scaled by the largest gradient magnitude (inf-norm)."""
    denom = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), 1e-8)
    return float(np.abs(analytic - numeric).max(initial=0.0) / denom)


def check_gradients(f: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error over ``inputs`` between backward() and finite differences."""
    for x in inputs:
        x.zero_grad()
    backward(f())
    analytic = [x.grad.copy() for x in inputs]
    worst = 0.0
    for x, a in zip(inputs, analytic):
        worst = max(worst, relative_error(a, numeric_grad(f, x, h)))
    return worst
