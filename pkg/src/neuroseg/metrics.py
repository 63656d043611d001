"""Training loss and evaluation metrics.

The training loss combines a soft multi-class Dice term with categorical
cross-entropy: L = -sum_s dice_s + sum_s sum_x (-T_s(x) log P_s(x)), both
terms over all 28 classes including background. Evaluation metrics (per
structure Dice, average and volume-weighted summaries) exclude background
and are computed on hard masks. All accumulation is float64.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .core import NUM_CLASSES

DICE_EPS = 1e-6
_LOG_CLAMP = 1e-12  # guards log/1-over-P once softmax underflows to 0


class CorrelationError(ValueError):
    """Pearson correlation is undefined (too few points or zero variance)."""


def _class_sums(P: np.ndarray, T: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-class sums of P*T, P and T over every non-class axis, float64."""
    if P.shape != T.shape:
        raise ad.ShapeError(f"prediction {P.shape} vs truth {T.shape}")
    caxis = 0 if P.ndim == 4 else 1
    axes = tuple(i for i in range(P.ndim) if i != caxis)
    inter = (P.astype(np.float64) * T).sum(axis=axes)
    psum = P.sum(axis=axes, dtype=np.float64)
    tsum = T.sum(axis=axes, dtype=np.float64)
    return inter, psum, tsum


def soft_dice_per_class(P: np.ndarray, T: np.ndarray) -> np.ndarray:
    """Smoothed Dice (2*sum(P*T)+eps)/(sum(P)+sum(T)+eps) for every class.

    With both masks empty the ratio degenerates to eps/eps = 1.
    """
    inter, psum, tsum = _class_sums(P, T)
    return (2.0 * inter + DICE_EPS) / (psum + tsum + DICE_EPS)


def dice_per_structure(P, T) -> Dict[int, float]:
    """Dice per anatomical structure (class indices 1..C-1, background excluded).

    Arguments are per-class fields (C, x, y, z) or (batch, C, x, y, z);
    P may be a soft distribution or a hard one-hot mask, T must be one-hot.
    """
    P = P.data if isinstance(P, Tensor) else np.asarray(P)
    T = np.asarray(T)
    dice = soft_dice_per_class(P, T)
    return {s: float(dice[s]) for s in range(1, dice.shape[0])}


@dataclass
class DiceReport:
    """Per-structure Dice with ground-truth volumes and both summary scores."""

    per_structure: Dict[int, float]
    volumes: Dict[int, int]
    missing: List[int] = field(default_factory=list)  # absent from ground truth

    @property
    def average(self) -> float:
        return average_dice(self)

    @property
    def volume_weighted(self) -> float:
        return weighted_dice(self)


def average_dice(report: DiceReport) -> float:
    """Arithmetic mean of per-structure Dice; background and structures absent
    from the ground truth are excluded."""
    scores = [d for s, d in report.per_structure.items() if report.volumes.get(s, 0) > 0]
    if not scores:
        raise ValueError("no structures present in ground truth")
    return float(np.mean(scores, dtype=np.float64))


def weighted_dice(report: DiceReport) -> float:
    """Ground-truth-volume-weighted mean of per-structure Dice."""
    num = 0.0
    den = 0.0
    for s, d in report.per_structure.items():
        v = report.volumes.get(s, 0)
        num += v * d
        den += v
    if den == 0:
        raise ValueError("no structures present in ground truth")
    return float(num / den)


def dice_report(pred_labels: np.ndarray, true_labels: np.ndarray, num_classes: int = NUM_CLASSES) -> DiceReport:
    """Evaluate a hard segmentation against hard ground truth.

    Uses joint label counts, which is exactly the set-overlap Dice
    2|A n B| / (|A| + |B|) under the eps smoothing.
    """
    pred = np.asarray(pred_labels).reshape(-1).astype(np.int64)
    true = np.asarray(true_labels).reshape(-1).astype(np.int64)
    if pred.shape != true.shape:
        raise ad.ShapeError("prediction and truth differ in voxel count")
    joint = np.bincount(true * num_classes + pred, minlength=num_classes * num_classes)
    joint = joint.reshape(num_classes, num_classes).astype(np.float64)
    true_counts = joint.sum(axis=1)
    pred_counts = joint.sum(axis=0)
    inter = np.diag(joint)
    dice = (2.0 * inter + DICE_EPS) / (true_counts + pred_counts + DICE_EPS)
    per_structure = {s: float(dice[s]) for s in range(1, num_classes)}
    volumes = {s: int(true_counts[s]) for s in range(1, num_classes)}
    missing = [s for s in range(1, num_classes) if volumes[s] == 0]
    return DiceReport(per_structure, volumes, missing)


def combined_loss(P: Tensor, T: np.ndarray) -> Tensor:
    """Scalar training loss on a softmax field P with one-hot truth T.

    Returns a graph scalar; backward() propagates through the softmax to the
    logits (and onward to the weights). The Dice fraction and the
    cross-entropy term share one hand-derived gradient, checked against
    finite differences in the test suite.
    """
    if not isinstance(P, Tensor):
        P = Tensor(np.asarray(P))
    T = np.asarray(T)
    if P.data.shape != T.shape:
        raise ad.ShapeError(f"prediction {P.data.shape} vs truth {T.shape}")
    caxis = 0 if P.data.ndim == 4 else 1
    axes = tuple(i for i in range(P.data.ndim) if i != caxis)
    cshape = tuple(
        P.data.shape[i] if i == caxis else 1 for i in range(P.data.ndim)
    )
    inter, psum, tsum = _class_sums(P.data, T)
    denom = psum + tsum + DICE_EPS
    dice = (2.0 * inter + DICE_EPS) / denom
    Pc = np.maximum(P.data, _LOG_CLAMP)
    ce = -(T * np.log(Pc)).sum(dtype=np.float64)
    value = np.asarray(ce - dice.sum())

    def bwd(g):
        # d(-dice_s)/dP = -(2*T*denom - (2*inter+eps)) / denom^2, per class
        ddice = (2.0 * T * denom.reshape(cshape) - (2.0 * inter + DICE_EPS).reshape(cshape))
        ddice = ddice / (denom ** 2).reshape(cshape)
        dce = np.where(P.data >= _LOG_CLAMP, -T / Pc, 0.0)
        P.accumulate_grad((g * (dce - ddice)).astype(P.data.dtype))

    return ad._make(value, (P,), bwd)


def pearson(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Product-moment correlation coefficient."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("pearson needs two equal-length 1-D sequences")
    if x.size < 3:
        raise CorrelationError(f"need at least 3 points, got {x.size}")
    xd = x - x.mean()
    yd = y - y.mean()
    sx = np.sqrt((xd * xd).sum())
    sy = np.sqrt((yd * yd).sum())
    if sx == 0.0 or sy == 0.0:
        raise CorrelationError("correlation undefined for zero-variance input")
    return float((xd * yd).sum() / (sx * sy))


def write_dice_rows(rows: Sequence[Tuple[str, DiceReport]], path) -> None:
    """Evaluation report: one row per (volume, structure) with Dice and
    ground-truth volume, then one summary row per volume carrying the average
    and volume-weighted scores."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["volume", "structure", "dice", "voxels", "d_a", "d_v"])
        for name, report in rows:
            for s in sorted(report.per_structure):
                if report.volumes.get(s, 0) > 0:
                    writer.writerow(
                        [name, s, repr(report.per_structure[s]), report.volumes[s], "", ""]
                    )
            writer.writerow(
                [name, "summary", "", "", repr(report.average), repr(report.volume_weighted)]
            )
