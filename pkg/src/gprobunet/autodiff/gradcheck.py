"""Central finite-difference gradient checks."""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor


def numerical_grad(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """d f / d x by central differences, perturbing ``x`` in place."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """Largest |a-b| relative to the larger magnitude (global scale, floored)."""
    scale = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), floor)
    return float(np.abs(a - b).max(initial=0.0) / scale)


def check_grad(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], h: float = 1e-5,
               seed: int = 0) -> float:
    """Compare backward() against finite differences of ``sum(fn(*inputs) * w)``.

    ``w`` is a fixed random projection so non-scalar outputs are checked in all
    directions. Returns the worst relative error over all inputs.
    """
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*tensors)
    w = np.random.default_rng(seed).normal(size=out.shape)
    (out * w).sum().backward()

    def f() -> float:
        for t, a in zip(tensors, arrays):
            t.data = a
        return float((fn(*[Tensor(a) for a in arrays]).data * w).sum())

    worst = 0.0
    for t, a in zip(tensors, arrays):
        num = numerical_grad(f, a, h)
        ana = t.grad if t.grad is not None else np.zeros_like(a)
        worst = max(worst, max_rel_error(ana, num))
    return worst
