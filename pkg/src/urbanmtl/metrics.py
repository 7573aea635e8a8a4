"""Confusion-matrix metrics, weighted accuracy and HSE density scores."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Optional

import numpy as np

from .core import (
    IGNORE,
    LCZ_CLASSES,
    NUM_LCZ_CLASSES,
    DegenerateError,
    RangeError,
    ShapeError,
    ValidationError,
)


class ConfusionMatrix:
    """``counts[i, j]`` = number of reference-class-i items predicted as j."""

    def __init__(self, k: int, counts: Optional[np.ndarray] = None):
        self.k = int(k)
        if counts is None:
            counts = np.zeros((k, k), dtype=np.int64)
        counts = np.asarray(counts, dtype=np.int64)
        if counts.shape != (k, k):
            raise ShapeError(f"counts must be {k}x{k}, got {counts.shape}")
        if (counts < 0).any():
            raise ValueError("counts must be non-negative")
        self.counts = counts

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.k != self.k:
            raise ShapeError("cannot merge confusion matrices of different size")
        return ConfusionMatrix(self.k, self.counts + other.counts)

    def __eq__(self, other):
        return isinstance(other, ConfusionMatrix) and np.array_equal(self.counts, other.counts)

    def __repr__(self):
        return f"ConfusionMatrix(k={self.k}, total={self.total})"


def accumulate(cm: ConfusionMatrix, ref_labels, pred_labels, ignore: int = IGNORE) -> ConfusionMatrix:
    """Return a new matrix with (ref, pred) pairs tallied; pairs with an IGNORE reference are skipped."""
    ref = np.asarray(ref_labels).ravel().astype(np.int64)
    pred = np.asarray(pred_labels).ravel().astype(np.int64)
    if ref.shape != pred.shape:
        raise ShapeError(f"{ref.size} reference labels vs {pred.size} predictions")
    keep = ref != ignore
    ref, pred = ref[keep], pred[keep]
    for name, arr in (("reference", ref), ("predicted", pred)):
        if arr.size and (arr.min() < 0 or arr.max() >= cm.k):
            raise IndexError(f"{name} label outside 0..{cm.k - 1}")
    counts = np.bincount(ref * cm.k + pred, minlength=cm.k * cm.k).reshape(cm.k, cm.k)
    return ConfusionMatrix(cm.k, cm.counts + counts)


def _total(cm: ConfusionMatrix) -> int:
    n = cm.total
    if n == 0:
        raise DegenerateError("empty confusion matrix")
    return n


def oa(cm: ConfusionMatrix) -> float:
    return float(np.trace(cm.counts) / _total(cm))


def kappa(cm: ConfusionMatrix) -> float:
    n = _total(cm)
    c = cm.counts.astype(np.float64)
    p_o = np.trace(c) / n
    p_e = float(c.sum(axis=1) @ c.sum(axis=0)) / (n * n)
    if p_e == 1.0:
        raise DegenerateError("kappa undefined when chance agreement is 1")
    return float((p_o - p_e) / (1.0 - p_e))


def recall(cm: ConfusionMatrix, cls: int) -> float:
    """Per-class recall; 0.0 when the class has no references (see :func:`class_scores`)."""
    row = cm.counts[cls].sum()
    return float(cm.counts[cls, cls] / row) if row else 0.0


def precision(cm: ConfusionMatrix, cls: int) -> float:
    col = cm.counts[:, cls].sum()
    return float(cm.counts[cls, cls] / col) if col else 0.0


def f_score(cm: ConfusionMatrix, cls: int) -> float:
    p, r = precision(cm, cls), recall(cm, cls)
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def aa(cm: ConfusionMatrix) -> float:
    """Mean recall over classes that occur in the reference."""
    _total(cm)
    present = np.flatnonzero(cm.counts.sum(axis=1))
    return float(np.mean([recall(cm, c) for c in present]))


def class_scores(cm: ConfusionMatrix, names=None) -> list[dict]:
    """Per-class recall/precision/F with a ``degenerate`` flag for zero-support classes."""
    rows = []
    for c in range(cm.k):
        support = int(cm.counts[c].sum())
        predicted = int(cm.counts[:, c].sum())
        rows.append(
            {
                "class": c,
                "name": names[c] if names is not None else str(c),
                "support": support,
                "recall": recall(cm, c),
                "precision": precision(cm, c),
                "f_score": f_score(cm, c),
                "degenerate": support == 0 or predicted == 0,
            }
        )
    return rows


class PenaltyMatrix:
    """Credit ``w[i, j]`` for predicting j where the reference is i; diagonal is 1."""

    def __init__(self, w):
        w = np.asarray(w, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ShapeError(f"penalty matrix must be square, got {w.shape}")
        if not np.all(np.diag(w) == 1.0):
            raise ValidationError("penalty matrix diagonal must be exactly 1")
        if (w < 0).any() or (w > 1).any():
            raise ValidationError("penalty entries must lie in [0, 1]")
        self.w = w

    @property
    def k(self) -> int:
        return self.w.shape[0]

    @classmethod
    def from_csv(cls, path) -> "PenaltyMatrix":
        with open(path, newline="") as fh:
            rows = [[float(v) for v in row] for row in csv.reader(fh) if row]
        return cls(rows)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerows(self.w.tolist())


def weighted_accuracy(cm: ConfusionMatrix, w: PenaltyMatrix) -> float:
    if w.k != cm.k:
        raise ShapeError(f"penalty matrix is {w.k}x{w.k}, confusion matrix is {cm.k}x{cm.k}")
    return float((w.w * cm.counts).sum() / _total(cm))


def default_lcz_penalty() -> PenaltyMatrix:
    """1 on the diagonal, 0.5 within the urban or natural group, 0 across groups."""
    groups = np.array([c.group.value for c in LCZ_CLASSES])
    w = np.where(groups[:, None] == groups[None, :], 0.5, 0.0)
    np.fill_diagonal(w, 1.0)
    return PenaltyMatrix(w)


def binarize_density(density, threshold: float = 0.5) -> np.ndarray:
    """1 (HSE) where density >= threshold, else 0."""
    d = np.asarray(density)
    if d.size and (np.nanmin(d) < 0 or np.nanmax(d) > 1):
        raise RangeError("density outside [0, 1]")
    if not 0 <= threshold <= 1:
        raise RangeError("threshold outside [0, 1]")
    return (d >= threshold).astype(np.uint8)


def density_mae(pred, ref) -> float:
    """Unweighted mean absolute error on the percent scale (0-100)."""
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ShapeError(f"pred {pred.shape} vs ref {ref.shape}")
    return float(100.0 * np.mean(np.abs(pred - ref)))


def lcz_report(cm: ConfusionMatrix, penalty: Optional[PenaltyMatrix] = None) -> dict:
    penalty = penalty or default_lcz_penalty()
    names = [c.name for c in LCZ_CLASSES] if cm.k == NUM_LCZ_CLASSES else None
    return {
        "oa": oa(cm),
        "kappa": kappa(cm),
        "aa": aa(cm),
        "wa": weighted_accuracy(cm, penalty),
        "per_class": class_scores(cm, names),
        "n": cm.total,
    }


def hse_report(pred_density, ref_density, threshold: float = 0.5) -> dict:
    """Density MAE plus binary (HSE vs non-HSE) agreement after thresholding both maps."""
    cm = accumulate(
        ConfusionMatrix(2), binarize_density(ref_density, threshold), binarize_density(pred_density, threshold)
    )
    try:
        k = kappa(cm)
    except DegenerateError:
        k = None
    return {
        "mae_percent": density_mae(pred_density, ref_density),
        "oa": oa(cm),
        "kappa": k,
        "aa": aa(cm),
        "recall": recall(cm, 1),
        "f_score": f_score(cm, 1),
        "confusion": cm.counts.tolist(),
    }
