"""Grad-CAM maps, per-channel attention distances and 1x1-convolution redundancy."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .autodiff import Graph, Tensor, ops
from .model import Model, layer_shapes

DEFAULT_REDUNDANCY_TOL = 1e-3


class DegenerateCamError(ValueError):
    pass


@dataclass
class CamMap:
    values: np.ndarray
    class_id: int
    layer_name: str
    importance_weights: np.ndarray
    activations: np.ndarray = field(repr=False, default=None)


@dataclass
class AttentionVector:
    values: np.ndarray
    raw_distances: np.ndarray


def spatial_layers(model: Model) -> list[str]:
    return [name for name, shape in layer_shapes(model.config) if len(shape) == 3]


def default_cam_layer(model: Model) -> str:
    """Last dense layer of the last block."""
    b = len(model.config.block_layers)
    return f"block{b}.layer{model.config.block_layers[-1]}"


def _single(image, cell_onehot) -> tuple[np.ndarray, np.ndarray]:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    oh = np.asarray(cell_onehot, dtype=np.float64).reshape(1, -1)
    return img, oh


def _check_target(model: Model, class_id: int, layer_name: str) -> None:
    if layer_name not in spatial_layers(model):
        raise KeyError(f"unknown layer {layer_name!r}; spatial layers are {spatial_layers(model)}")
    if not 0 <= class_id < model.config.num_classes:
        raise IndexError(f"class {class_id} out of range for {model.config.num_classes} classes")


def class_score(model: Model, image, cell_onehot, class_id: int, layer_name: str | None = None,
                activation: np.ndarray | None = None) -> float:
    """Pre-softmax score of ``class_id``, optionally with the named layer's output replaced."""
    img, oh = _single(image, cell_onehot)
    hooks = None
    if layer_name is not None and activation is not None:
        hooks = {layer_name: lambda _t: Tensor(activation)}
    soft, _ = model.logits(model.forward_embedding(img, oh, hooks=hooks))
    return float(soft.data[0, class_id])


def gradcam(model: Model, image, cell_onehot, class_id: int, layer_name: str | None = None) -> CamMap:
    """ReLU of the activation maps weighted by their spatially averaged score gradients.

    The model's parameter gradients are left untouched.
    """
    layer_name = layer_name or default_cam_layer(model)
    _check_target(model, class_id, layer_name)
    img, oh = _single(image, cell_onehot)
    leaf: dict[str, Tensor] = {}

    def swap(t: Tensor) -> Tensor:
        leaf["A"] = Tensor(t.data, requires_grad=True)
        return leaf["A"]

    with Graph() as g:
        soft, _ = model.logits(model.forward_embedding(img, oh, hooks={layer_name: swap}))
        score = ops.pick(soft, [class_id])
    g.backward(score, accumulate_leaves=False)
    A = leaf["A"].data[0]
    dA = g.grad_of(leaf["A"])
    dA = np.zeros_like(A) if dA is None else dA[0]
    z = A.shape[1] * A.shape[2]
    weights = dA.sum(axis=(1, 2)) / z
    cam = np.maximum(np.tensordot(weights, A, axes=(0, 0)), 0.0)
    return CamMap(values=cam, class_id=class_id, layer_name=layer_name, importance_weights=weights, activations=A)


def bilinear_resize(plane: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping."""
    h, w = plane.shape

    def coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * n_in / n_out - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = coords(h, out_h)
    c0, c1, fc = coords(w, out_w)
    top = plane[r0][:, c0] * (1 - fc) + plane[r0][:, c1] * fc
    bot = plane[r1][:, c0] * (1 - fc) + plane[r1][:, c1] * fc
    return top * (1 - fr)[:, None] + bot * fr[:, None]


def normalized_cam(cam: CamMap | np.ndarray, height: int, width: int) -> np.ndarray:
    values = cam.values if isinstance(cam, CamMap) else np.asarray(cam, dtype=np.float64)
    up = bilinear_resize(values, height, width)
    lo, hi = up.min(), up.max()
    if not hi > lo:
        raise DegenerateCamError("CAM is constant (e.g. all zero); cannot min-max normalise")
    return (up - lo) / (hi - lo)


def channel_attention(cam: CamMap | np.ndarray, image: np.ndarray) -> AttentionVector:
    """L2 distance between the normalised CAM and each image channel, max-normalised.

    A *lower* raw distance means the channel resembles the map more closely.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"image must be C x H x W, got {image.shape}")
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image channels must be normalised to [0, 1]")
    plane = normalized_cam(cam, image.shape[1], image.shape[2])
    dist = np.sqrt(((image - plane[None]) ** 2).sum(axis=(1, 2)))
    top = dist.max()
    if not top > 0:
        raise DegenerateCamError("every channel coincides with the CAM; attention is undefined")
    return AttentionVector(values=dist / top, raw_distances=dist)


def conv1x1_weight_matrix(model: Model, layer_name: str) -> np.ndarray:
    """C_out x C_in matrix whose row k is the k-th 1x1 filter."""
    name = layer_name if layer_name in model.params else f"{layer_name}.conv"
    if name not in model.params:
        raise KeyError(f"no parameter named {layer_name!r}")
    w = model.params[name].data
    if w.ndim != 4 or w.shape[2:] != (1, 1):
        raise ValueError(f"{name} is not a 1x1 convolution (weight shape {w.shape})")
    return w[:, :, 0, 0].copy()


def redundancy_score(weights: np.ndarray, tol: float | None = None) -> tuple[float, float]:
    """Fractions of constant-weight rows (bands) and of rows with a near-duplicate (blocks).

    ``tol`` is absolute; by default it is 1e-3 times the largest |weight|.
    """
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[0] == 0:
        raise ValueError(f"weights must be a non-empty 2-D matrix, got {w.shape}")
    if tol is None:
        tol = DEFAULT_REDUNDANCY_TOL * float(np.abs(w).max())
        if tol == 0.0:
            tol = DEFAULT_REDUNDANCY_TOL
    if not tol > 0:
        raise ValueError("tol must be positive")
    rows = w.shape[0]
    band = np.abs(w - w.mean(axis=1, keepdims=True)).max(axis=1) <= tol
    diff = np.abs(w[:, None, :] - w[None, :, :]).max(axis=2)
    np.fill_diagonal(diff, np.inf)
    dup = (diff <= tol).any(axis=1)
    return float(band.sum()) / rows, float(dup.sum()) / rows


# ---------------------------------------------------------------------------
# exports


def write_pgm8(path: str | Path, plane: np.ndarray) -> None:
    """Min-max scale to 0..255 and write a binary P5 PGM."""
    plane = np.asarray(plane, dtype=np.float64)
    lo, hi = plane.min(), plane.max()
    scaled = np.zeros_like(plane) if hi <= lo else (plane - lo) / (hi - lo)
    pix = np.rint(scaled * 255).astype(np.uint8)
    h, w = pix.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + pix.tobytes())


def write_metric_rows(path: str | Path, rows: Iterable[tuple[str, str, float]]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["layer", "channel_or_metric", "value"])
        for layer, key, value in rows:
            writer.writerow([layer, key, f"{value:.10g}"])


def attention_rows(layer: str, attention: AttentionVector) -> list[tuple[str, str, float]]:
    return [(layer, f"channel{i + 1}", float(v)) for i, v in enumerate(attention.values)]


def redundancy_rows(model: Model, tol: float | None = None) -> list[tuple[str, str, float]]:
    rows = []
    for name in model.conv_layer_names(kernel=1):
        band, block = redundancy_score(conv1x1_weight_matrix(model, name), tol)
        rows.append((name, "band_fraction", band))
        rows.append((name, "block_fraction", block))
    return rows
