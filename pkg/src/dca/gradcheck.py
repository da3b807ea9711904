"""Central finite differences for checking analytic gradients."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5,
                   coords: Sequence[tuple] | None = None) -> np.ndarray:
    """d f / d x by central differences; ``x`` is perturbed in place and restored.

    With ``coords`` only those entries are probed (the rest stay 0).
    """
    grad = np.zeros_like(x)
    it = coords if coords is not None else list(np.ndindex(*x.shape))
    for idx in it:
        old = x[idx]
        x[idx] = old + h
        up = f()
        x[idx] = old - h
        down = f()
        x[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def check_gradients(build: Callable[[], Tensor], inputs: Sequence[Tensor], h: float = 1e-5) -> float:
    """Worst relative error between backward() and central differences over ``inputs``.

    ``build`` must recompute the scalar output from the current input data.
    """
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    build().backward()
    analytic = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in inputs]
    worst = 0.0
    for t, a in zip(inputs, analytic):
        n = numerical_grad(lambda: build().item(), t.data, h)
        worst = max(worst, relative_error(a, n))
    return worst
