from __future__ import annotations

from typing import Callable

import numpy as np

from .tensor import Graph, Tensor


def numeric_grad(f: Callable[[Tensor], Tensor], x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x`` (no graph involved)."""
    x = np.array(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = float(f(Tensor(x)).data)
        flat[i] = orig - eps
        fm = float(f(Tensor(x)).data)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * eps)
    return grad


def analytic_grad(f: Callable[[Tensor], Tensor], x: np.ndarray) -> np.ndarray:
    t = Tensor(x, requires_grad=True)
    with Graph() as g:
        out = f(t)
    if not out.requires_grad:  # output does not depend on x
        return np.zeros_like(t.data)
    g.backward(out)
    return np.zeros_like(t.data) if t.grad is None else t.grad


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max over components of |analytic - numeric| / max(1, |analytic|).

    Returns NaN-safe: a non-finite numeric estimate yields ``inf``.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    try:
        num = numeric_grad(f, x, eps)
    except ValueError:
        return float("inf")
    ana = analytic_grad(f, x)
    err = np.abs(ana - num) / np.maximum(1.0, np.abs(ana))
    if not np.all(np.isfinite(err)):
        return float("inf")
    return float(err.max()) if err.size else 0.0
