"""Pseudo-labelling: argmax targets for unlabeled samples and the ramped combined objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, ops
from .losses import LossConfig, composite_loss, softmax_ce


@dataclass(frozen=True)
class PLSchedule:
    T1: int = 5
    T2: int = 15
    alpha_f: float = 3.0

    def __post_init__(self):
        if not 0 <= self.T1 < self.T2:
            raise ValueError(f"need 0 <= T1 < T2, got T1={self.T1}, T2={self.T2}")
        if not self.alpha_f > 0:
            raise ValueError("alpha_f must be positive")


@dataclass
class Batch:
    """Images (N x C x H x W), cell one-hots (N x 4) and optional labels.

    ``labels`` is either a length-N int array or an N x K soft-label matrix.
    """

    images: np.ndarray
    cell_onehots: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self) -> int:
        return int(self.images.shape[0])


def pseudo_label(probs) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim not in (1, 2) or np.any(p < 0) or np.any(np.abs(p.sum(axis=-1) - 1.0) > 1e-6):
        raise ValueError("probabilities must be non-negative and sum to 1 within 1e-6")
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    out = np.zeros_like(p)
    if p.ndim == 1:
        out[np.argmax(p)] = 1.0
    else:
        out[np.arange(p.shape[0]), p.argmax(axis=1)] = 1.0
    return out


def alpha_schedule(t: float, sched: PLSchedule) -> float:
    """Zero until T1, linear ramp to alpha_f at T2, constant after."""
    if t <= sched.T1:
        return 0.0
    if t >= sched.T2:
        return float(sched.alpha_f)
    return float(sched.alpha_f) * (t - sched.T1) / (sched.T2 - sched.T1)


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def unlabeled_loss(model, batch: Batch) -> tuple[Tensor, np.ndarray]:
    """Softmax cross-entropy against the model's own argmax labels.

    Pseudo labels come from ``.data`` so no gradient reaches the model
    through the label path.
    """
    emb = model.forward_embedding(batch.images, batch.cell_onehots)
    soft, _ = model.logits(emb)
    targets = pseudo_label(_softmax(soft.data)).argmax(axis=1)
    return softmax_ce(soft, targets), targets


def combined_loss(
    labeled: Batch,
    unlabeled: Batch | None,
    model,
    t: float,
    sched: PLSchedule,
    loss_config: LossConfig = LossConfig(),
) -> Tensor:
    """Supervised composite loss plus ``alpha(t)`` times the pseudo-label loss."""
    if labeled is None or len(labeled) == 0:
        raise ValueError("combined_loss needs at least one labeled sample")
    emb = model.forward_embedding(labeled.images, labeled.cell_onehots)
    soft, cosines = model.logits(emb)
    loss = composite_loss(soft, cosines, labeled.labels, loss_config)
    alpha = alpha_schedule(t, sched)
    if unlabeled is None or len(unlabeled) == 0 or alpha == 0.0:
        return loss
    u_loss, _ = unlabeled_loss(model, unlabeled)
    return ops.add(loss, ops.scalar_mul(u_loss, alpha))
