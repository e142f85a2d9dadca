"""Softmax cross-entropy, L2 normalisation, additive angular margin and the composite loss.

All losses return a scalar :class:`Tensor` and are differentiable through the
autodiff ops.  The angular margin is applied literally as ``s*cos(acos(c_y) + m)``;
there is no "easy margin" fallback when ``theta_y + m`` exceeds pi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor, ops
from .autodiff.ops import DegenerateVectorError

COSINE_TOLERANCE = 1e-9


@dataclass(frozen=True)
class LossConfig:
    s: float = 30.0
    m: float = 0.5
    c: float = 0.2

    def __post_init__(self):
        if not self.s > 0:
            raise ValueError(f"s must be positive, got {self.s}")
        if not 0 <= self.m < math.pi / 2:
            raise ValueError(f"m must lie in [0, pi/2), got {self.m}")
        if not 0 <= self.c <= 1:
            raise ValueError(f"c must lie in [0, 1], got {self.c}")


def _hard_or_soft(labels, n: int, k: int) -> tuple[np.ndarray | None, np.ndarray | None]:
    arr = np.asarray(labels)
    if arr.ndim == 1:
        if arr.shape[0] != n:
            raise ShapeError(f"expected {n} labels, got {arr.shape[0]}")
        if not np.issubdtype(arr.dtype, np.integer):
            if not np.all(arr == np.round(arr)):
                raise ValueError("hard labels must be integers")
            arr = arr.astype(np.intp)
        if np.any(arr < 0) or np.any(arr >= k):
            raise IndexError(f"label index out of range for {k} classes")
        return arr.astype(np.intp), None
    if arr.shape != (n, k):
        raise ShapeError(f"soft labels must be {n} x {k}, got {arr.shape}")
    soft = arr.astype(np.float64)
    if np.any(soft < 0) or np.any(np.abs(soft.sum(axis=1) - 1.0) > 1e-6):
        raise ValueError("soft label rows must be non-negative and sum to 1 within 1e-6")
    return None, soft


def softmax_ce(logits, labels) -> Tensor:
    """Mean cross-entropy of ``softmax(logits)`` against hard indices or soft rows."""
    z = as_tensor(logits)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ShapeError(f"softmax_ce: logits must be N x K with K >= 2, got {z.shape}")
    n, k = z.shape
    hard, soft = _hard_or_soft(labels, n, k)
    lse = ops.logsumexp(z)
    if hard is not None:
        target = ops.pick(z, hard)
        per_sample = ops.sub(lse, target)
    else:
        # soft rows sum to 1, so -sum_k y_k log p_k = lse - sum_k y_k z_k
        target = ops.sum(ops.mul(z, Tensor(soft)), axis=1)
        per_sample = ops.sub(lse, target)
    return ops.scalar_mul(ops.sum(per_sample), 1.0 / n)


def l2_normalize(x, scale: float = 1.0) -> Tensor:
    """``scale * x / ||x||`` along the last axis."""
    if not scale > 0:
        raise ValueError("scale must be positive")
    x = as_tensor(x)
    if np.any(np.linalg.norm(x.data, axis=-1) <= 1e-12):
        raise DegenerateVectorError("cannot normalise a near-zero vector")
    return ops.l2norm(x, scale)


def margin_logits(cosines, labels, s: float, m: float) -> Tensor:
    """``s*cos(theta_j)`` for non-targets and ``s*cos(theta_y + m)`` for the target."""
    cos_t = as_tensor(cosines)
    if cos_t.ndim != 2:
        raise ShapeError(f"cosines must be N x K, got {cos_t.shape}")
    n, k = cos_t.shape
    hard, soft = _hard_or_soft(labels, n, k)
    if hard is None:
        raise ValueError("arc_margin_loss takes hard labels only")
    if np.any(np.abs(cos_t.data) > 1.0 + COSINE_TOLERANCE):
        raise ValueError("cosine values outside [-1, 1]")
    lim = 1.0 - COSINE_TOLERANCE
    target = ops.clamp(ops.pick(cos_t, hard), -lim, lim)
    shifted = ops.cos(ops.add_scalar(ops.acos(target), m))
    return ops.scalar_mul(ops.index_put(cos_t, hard, shifted), s)


def arc_margin_loss(cosines, labels, config: LossConfig = LossConfig()) -> Tensor:
    return softmax_ce(margin_logits(cosines, labels, config.s, config.m), labels)


def dominant_labels(labels) -> np.ndarray:
    """Hard index per row; soft rows map to the class holding weight >= 0.5 (argmax)."""
    arr = np.asarray(labels)
    if arr.ndim == 1:
        return arr.astype(np.intp)
    return arr.argmax(axis=1).astype(np.intp)


def composite_loss(softmax_logits, cosines, labels, config: LossConfig = LossConfig()) -> Tensor:
    """``c * arc_margin + (1 - c) * softmax_ce``.

    Soft (CutMix) labels feed the softmax term directly; the angular term
    uses each row's dominant class.  The endpoints c=0 and c=1 return the
    single component loss unscaled.
    """
    if config.c == 0.0:
        return softmax_ce(softmax_logits, labels)
    arc = arc_margin_loss(cosines, dominant_labels(labels), config)
    if config.c == 1.0:
        return arc
    soft = softmax_ce(softmax_logits, labels)
    return ops.add(ops.scalar_mul(arc, config.c), ops.scalar_mul(soft, 1.0 - config.c))
