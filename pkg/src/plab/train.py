"""Mini-batch SGD training with optional CutMix and pseudo-labelling stages."""

from __future__ import annotations

import csv
import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .augment import cutmix_batch
from .autodiff import Graph
from .config import RunConfig
from .data import ArraySet, load_arrays, read_manifest
from .losses import composite_loss
from .model import Model, build_model
from .semisup import Batch, alpha_schedule, combined_loss

log = logging.getLogger(__name__)

METRIC_COLUMNS = [
    "epoch", "alpha", "pl_active", "cutmix_active", "opt_loss",
    "train_loss", "train_acc", "val_loss", "val_acc",
]


@dataclass
class Splits:
    train: ArraySet
    val: ArraySet
    unlabeled: ArraySet
    test: ArraySet

    @classmethod
    def load(cls, root: str | Path) -> Splits:
        rows = read_manifest(root)
        return cls(*(load_arrays(root, (name,), rows) for name in ("train", "val", "unlabeled", "test")))


@dataclass
class TrainResult:
    model: Model
    metrics: list[dict] = field(default_factory=list)


def sgd_step(model: Model, lr: float, weight_decay: float = 0.0) -> None:
    for p in model.parameters():
        if p.grad is None:
            continue
        g = p.grad if weight_decay == 0.0 else p.grad + weight_decay * p.data
        p.data -= lr * g
        p.grad = None


def evaluate(model: Model, arrays: ArraySet, cfg: RunConfig, batch_size: int = 64) -> tuple[float, float]:
    """Mean composite loss and accuracy over labeled rows (nan when empty)."""
    keep = np.flatnonzero(arrays.labels >= 0)
    if len(keep) == 0:
        return float("nan"), float("nan")
    loss_sum, correct = 0.0, 0
    for s in range(0, len(keep), batch_size):
        idx = keep[s:s + batch_size]
        soft, cosines = model.logits(model.forward_embedding(arrays.images[idx], arrays.cell_onehots[idx]))
        y = arrays.labels[idx]
        loss_sum += composite_loss(soft, cosines, y, cfg.loss_config()).item() * len(idx)
        correct += int((soft.data.argmax(axis=1) == y).sum())
    return loss_sum / len(keep), correct / len(keep)


def input_statistics(images: np.ndarray) -> tuple[list[float], list[float]]:
    """Per-channel mean and standard deviation over a N x C x H x W stack."""
    if len(images) == 0:
        return [], []
    mean = images.mean(axis=(0, 2, 3))
    std = np.maximum(images.std(axis=(0, 2, 3)), 1e-6)
    return [float(v) for v in mean], [float(v) for v in std]


def train(cfg: RunConfig, splits: Splits, metrics_path: str | Path | None = None) -> TrainResult:
    """Train a fresh model; every random draw derives from ``cfg.seed``."""
    cfg.validate()
    tr, unl = splits.train, splits.unlabeled
    labeled = np.flatnonzero(tr.labels >= 0)
    mean, std = input_statistics(tr.images[labeled])
    model = build_model(dataclasses.replace(cfg.model_config(), input_mean=mean, input_std=std))
    sched = cfg.schedule()
    rng = np.random.default_rng([cfg.seed, 2])
    k = cfg.num_classes
    result = TrainResult(model)
    writer = None
    fh = None
    if metrics_path is not None:
        fh = open(metrics_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, lineterminator="\n")
        writer.writeheader()
        fh.flush()
    try:
        for epoch in range(1, cfg.epochs + 1):
            alpha = alpha_schedule(epoch, sched) if cfg.pseudo_label else 0.0
            cutmix_on = cfg.cutmix_alpha > 0 and epoch >= cfg.cutmix_start
            order = rng.permutation(labeled)
            u_order = rng.permutation(len(unl)) if alpha > 0 and len(unl) else np.zeros(0, int)
            u_pos = 0
            losses = []
            for s in range(0, len(order), cfg.batch_size):
                idx = order[s:s + cfg.batch_size]
                images, labels = tr.images[idx], tr.labels[idx]
                if cutmix_on and rng.random() < cfg.cutmix_prob:
                    images, labels = cutmix_batch(images, np.eye(k)[labels], cfg.cutmix_alpha, rng)
                lb = Batch(images, tr.cell_onehots[idx], labels)
                ub = None
                if len(u_order):
                    take = np.take(u_order, range(u_pos, u_pos + cfg.batch_size), mode="wrap")
                    u_pos += cfg.batch_size
                    ub = Batch(unl.images[take], unl.cell_onehots[take])
                with Graph() as g:
                    loss = combined_loss(lb, ub, model, epoch, sched, cfg.loss_config())
                g.backward(loss)
                sgd_step(model, cfg.learning_rate, cfg.weight_decay)
                losses.append(loss.item())
            train_loss, train_acc = evaluate(model, tr, cfg)
            val_loss, val_acc = evaluate(model, splits.val, cfg)
            row = dict(
                epoch=epoch, alpha=f"{alpha:.6g}", pl_active=int(alpha > 0), cutmix_active=int(cutmix_on),
                opt_loss=f"{np.mean(losses):.10g}", train_loss=f"{train_loss:.10g}", train_acc=f"{train_acc:.10g}",
                val_loss=f"{val_loss:.10g}", val_acc=f"{val_acc:.10g}",
            )
            result.metrics.append(row)
            log.info("epoch %d train_acc %.3f val_acc %.3f loss %.4f", epoch, train_acc, val_acc, np.mean(losses))
            if writer is not None:
                writer.writerow(row)
                fh.flush()
    finally:
        if fh is not None:
            fh.close()
    return result
