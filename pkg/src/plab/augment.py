"""CutMix box sampling and mixing, plus the dihedral flip/rotate transforms.

Images are channel-first (C x H x W).  A CutMix box is sampled around a
centre point with extents ``W*sqrt(1-lam)`` by ``H*sqrt(1-lam)``, floored to
integer pixel bounds and clipped to the image; the label weight is recomputed
from the clipped area so the mixed label always matches the pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CutMixBox:
    r_x: float
    r_y: float
    r_w: float
    r_h: float
    x0: int
    y0: int
    x1: int  # exclusive
    y1: int  # exclusive
    lambda_used: float

    @property
    def area(self) -> int:
        return (self.x1 - self.x0) * (self.y1 - self.y0)


def sample_cutmix_box(
    W: int,
    H: int,
    lam: float,
    rng: np.random.Generator,
    interior: bool = False,
) -> CutMixBox:
    """Sample a box whose unclipped area ratio is ``1 - lam``.

    With ``interior=True`` the centre is drawn only from positions that keep
    the unclipped box inside the image.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if W < 1 or H < 1:
        raise ValueError("image extents must be >= 1")
    cut = math.sqrt(1.0 - lam)
    r_w, r_h = W * cut, H * cut
    if interior:
        r_x = rng.uniform(r_w / 2, W - r_w / 2)
        r_y = rng.uniform(r_h / 2, H - r_h / 2)
    else:
        r_x = rng.uniform(0, W)
        r_y = rng.uniform(0, H)
    return box_at(W, H, r_x, r_y, r_w, r_h)


def box_at(W: int, H: int, r_x: float, r_y: float, r_w: float, r_h: float) -> CutMixBox:
    x0 = min(max(math.floor(r_x - r_w / 2), 0), W)
    x1 = min(max(math.floor(r_x + r_w / 2), 0), W)
    y0 = min(max(math.floor(r_y - r_h / 2), 0), H)
    y1 = min(max(math.floor(r_y + r_h / 2), 0), H)
    lam_used = 1.0 - (x1 - x0) * (y1 - y0) / (W * H)
    return CutMixBox(r_x, r_y, r_w, r_h, x0, y0, x1, y1, lam_used)


def box_mask(box: CutMixBox, W: int, H: int) -> np.ndarray:
    """H x W mask: 0 inside the box, 1 elsewhere."""
    m = np.ones((H, W))
    m[box.y0:box.y1, box.x0:box.x1] = 0.0
    return m


def apply_cutmix(
    x_a: np.ndarray,
    x_b: np.ndarray,
    y_a: np.ndarray,
    y_b: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
    lam: float | None = None,
) -> tuple[np.ndarray, np.ndarray, float]:
    """Paste a box of ``x_b`` into ``x_a``; mix labels by the realised area.

    ``lam`` overrides the Beta(alpha, alpha) draw.
    """
    x_a, x_b = np.asarray(x_a, dtype=np.float64), np.asarray(x_b, dtype=np.float64)
    if x_a.shape != x_b.shape or x_a.ndim != 3:
        raise ValueError(f"CutMix needs two C x H x W images of equal shape, got {x_a.shape} and {x_b.shape}")
    y_a, y_b = np.asarray(y_a, dtype=np.float64), np.asarray(y_b, dtype=np.float64)
    if y_a.shape != y_b.shape:
        raise ValueError(f"label shapes differ: {y_a.shape} vs {y_b.shape}")
    if not alpha > 0:
        raise ValueError("alpha must be positive")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    _, H, W = x_a.shape
    box = sample_cutmix_box(W, H, lam, rng)
    mask = box_mask(box, W, H)
    x_hat = mask * x_a + (1.0 - mask) * x_b
    y_hat = box.lambda_used * y_a + (1.0 - box.lambda_used) * y_b
    return x_hat, y_hat, box.lambda_used


def cutmix_batch(
    images: np.ndarray,
    onehot_labels: np.ndarray,
    alpha: float,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Mix each sample with a randomly permuted partner from the same batch."""
    perm = rng.permutation(images.shape[0])
    xs, ys = [], []
    for i, j in enumerate(perm):
        x, y, _ = apply_cutmix(images[i], images[j], onehot_labels[i], onehot_labels[j], alpha, rng)
        xs.append(x)
        ys.append(y)
    return np.stack(xs), np.stack(ys)


FLIP_ROTATE_OPS = ("hflip", "vflip", "rot90", "rot180", "rot270")
INVERSE = {"hflip": "hflip", "vflip": "vflip", "rot90": "rot270", "rot180": "rot180", "rot270": "rot90"}


def flip_rotate(x: np.ndarray, op: str) -> np.ndarray:
    """Exact pixel permutation of the last two axes."""
    x = np.asarray(x)
    if op == "hflip":
        return x[..., :, ::-1].copy()
    if op == "vflip":
        return x[..., ::-1, :].copy()
    if op not in ("rot90", "rot180", "rot270"):
        raise ValueError(f"unknown transform {op!r}; expected one of {FLIP_ROTATE_OPS}")
    if x.shape[-1] != x.shape[-2]:
        raise ValueError(f"rotation needs a square image, got {x.shape[-2]} x {x.shape[-1]}")
    k = {"rot90": 1, "rot180": 2, "rot270": 3}[op]
    return np.rot90(x, k=k, axes=(-2, -1)).copy()
