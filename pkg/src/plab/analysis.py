"""Template and feature-vector analysis: extraction, PCA projection, spread and control checks."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .model import Model

HEADS = {"softmax": "head.soft", "arc": "head.arc"}


class DegenerateProjectionError(ValueError):
    pass


@dataclass
class TemplateMatrix:
    W: np.ndarray
    head: str
    junk_mask: np.ndarray

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.argmax(np.atleast_2d(x) @ self.W.T, axis=1)


@dataclass
class SpreadReport:
    mean_offdiag_cosine: float
    junk_vs_real_cosine_gap: float | None
    cluster_tightness: dict[int, float]


def extract_templates(model: Model, head: str = "softmax", junk_mask=None) -> TemplateMatrix:
    if head not in HEADS:
        raise KeyError(f"unknown head {head!r}; choose from {sorted(HEADS)}")
    W = model.params[HEADS[head]].data.copy()
    mask = np.zeros(W.shape[0], dtype=bool) if junk_mask is None else np.asarray(junk_mask, dtype=bool)
    if mask.shape != (W.shape[0],):
        raise ValueError(f"junk mask needs {W.shape[0]} entries, got {mask.shape}")
    return TemplateMatrix(W=W, head=head, junk_mask=mask)


def project_2d(vectors: np.ndarray) -> np.ndarray:
    """Coordinates on the top two principal axes of the mean-centred rows.

    Each axis is signed so its largest-magnitude loading is positive.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ValueError(f"need at least 2 vectors of dimension >= 2, got {x.shape}")
    xc = x - x.mean(axis=0)
    if not np.any(np.abs(xc) > 1e-12 * max(1.0, np.abs(x).max())):
        raise DegenerateProjectionError("all vectors coincide; no principal direction")
    _, sv, vt = np.linalg.svd(xc, full_matrices=False)
    axes = vt[:2].copy()
    for k in range(2):
        if k >= len(sv) or sv[k] <= 1e-12 * sv[0]:
            axes[k] = 0.0  # rank-deficient: no second direction to report
            continue
        if axes[k][np.argmax(np.abs(axes[k]))] < 0:
            axes[k] = -axes[k]
    return xc @ axes.T


def explained_variance(vectors: np.ndarray, k: int = 2) -> np.ndarray:
    xc = np.asarray(vectors, dtype=np.float64) - np.mean(vectors, axis=0)
    sv = np.linalg.svd(xc, compute_uv=False)
    return (sv[:k] ** 2) / (xc.shape[0] - 1)


def _unit_rows(m: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.where(n > 0, n, 1.0)


def _mean_offdiag(c: np.ndarray) -> float:
    n = c.shape[0]
    if n < 2:
        return float("nan")
    return float((c.sum() - np.trace(c)) / (n * (n - 1)))


def spread_report(templates: TemplateMatrix, features: np.ndarray | None = None,
                  labels: np.ndarray | None = None) -> SpreadReport:
    """Template spread, junk-cluster separation and per-class feature tightness.

    The gap is mean junk-junk cosine minus mean junk-real cosine; it is
    ``None`` with fewer than two junk classes.
    """
    real = ~templates.junk_mask
    if real.sum() < 2:
        raise ValueError("spread_report needs at least two non-junk classes")
    u = _unit_rows(templates.W)
    cos = np.clip(u @ u.T, -1.0, 1.0)
    mean_off = _mean_offdiag(cos[np.ix_(real, real)])
    gap = None
    junk = templates.junk_mask
    if junk.sum() >= 2:
        gap = _mean_offdiag(cos[np.ix_(junk, junk)]) - float(cos[np.ix_(junk, real)].mean())
    tight: dict[int, float] = {}
    if features is not None and labels is not None:
        f = _unit_rows(np.asarray(features, dtype=np.float64))
        labels = np.asarray(labels)
        for cls in np.unique(labels):
            members = f[labels == cls]
            if len(members) >= 2:
                tight[int(cls)] = _mean_offdiag(np.clip(members @ members.T, -1.0, 1.0))
    return SpreadReport(mean_offdiag_cosine=mean_off, junk_vs_real_cosine_gap=gap, cluster_tightness=tight)


@dataclass
class ControlReport:
    threshold: float
    negative: list[tuple[str, float, bool]]  # (id, max prob, flagged)
    positive: list[tuple[str, int, int, bool]]  # (id, known class, predicted, correct)
    notice: str = ""

    @property
    def positive_accuracy(self) -> float | None:
        if not self.positive:
            return None
        return sum(1 for *_, ok in self.positive if ok) / len(self.positive)

    @property
    def flagged_negatives(self) -> int:
        return sum(1 for *_, f in self.negative if f)

    def rows(self) -> list[tuple[str, str, str]]:
        out = [(sid, "negative_max_prob", f"{p:.10g}") for sid, p, _ in self.negative]
        out += [(sid, "negative_flagged", str(int(f))) for sid, _, f in self.negative]
        out += [(sid, "positive_correct", str(int(ok))) for sid, _, _, ok in self.positive]
        if self.positive:
            out.append(("all", "positive_accuracy", f"{self.positive_accuracy:.10g}"))
        return out


def default_threshold(num_classes: int) -> float:
    """Five times the uniform probability, capped at 1."""
    return min(1.0, 5.0 / num_classes)


def control_check(model: Model, arrays, threshold: float | None = None, batch_size: int = 64) -> ControlReport:
    """Confidence on negative controls and argmax correctness on positive controls.

    ``arrays`` is an :class:`~plab.data.ArraySet`; only its control rows are used.
    """
    k = model.config.num_classes
    threshold = default_threshold(k) if threshold is None else threshold
    idx = [i for i, c in enumerate(arrays.controls) if c in ("negative", "positive")]
    if not idx:
        return ControlReport(threshold, [], [], notice="no control samples present")
    probs = np.concatenate([
        model.predict_proba(arrays.images[idx[s:s + batch_size]], arrays.cell_onehots[idx[s:s + batch_size]])
        for s in range(0, len(idx), batch_size)
    ])
    neg, pos = [], []
    for p, i in zip(probs, idx):
        sid = arrays.ids[i]
        if arrays.controls[i] == "negative":
            top = float(p.max())
            # threshold 1.0 can never be exceeded, so nothing is flagged there
            neg.append((sid, top, bool(top >= threshold and threshold < 1.0)))
        else:
            known = int(arrays.labels[i])
            pred = int(np.argmax(p))
            pos.append((sid, known, pred, pred == known))
    return ControlReport(threshold, neg, pos)


def write_rows(path: str | Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
