"""Segmentation quality metrics and model accounting.

Scores follow the standard confusion-count definitions (IoU, Dice/F1, DSC);
Hausdorff distances are exact boundary-to-boundary percentiles suitable for
desk-scale masks. The flop counter reports multiply-accumulate operations
for convolutions and matrix products (the counting convention of the usual
segmentation-toolbox accounting) plus per-element costs for pointwise work.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy.spatial.distance import cdist

from .errors import DataError, ShapeError
from .tensor import count_flops, no_grad, zeros

__all__ = [
    "ConfusionCounts",
    "MetricsReport",
    "confusion",
    "scores",
    "hausdorff",
    "HausdorffResult",
    "boundary_pixels",
    "model_stats",
    "axial_attention_macs",
    "mca_attention_macs",
    "dense_attention_macs",
]


@dataclass
class ConfusionCounts:
    """Per-class true-positive / false-positive / false-negative pixel counts."""

    tp: np.ndarray
    fp: np.ndarray
    fn: np.ndarray

    @property
    def num_classes(self) -> int:
        return len(self.tp)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> ConfusionCounts:
    """Exact per-class confusion counts between two label masks."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ShapeError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    p = pred.reshape(-1).astype(np.int64)
    g = gt.reshape(-1).astype(np.int64)
    if p.size and (p.min() < 0 or p.max() >= num_classes):
        raise DataError(f"prediction labels outside [0, {num_classes})")
    if g.size and (g.min() < 0 or g.max() >= num_classes):
        raise DataError(f"ground-truth labels outside [0, {num_classes})")
    hist = np.bincount(num_classes * g + p, minlength=num_classes ** 2)
    hist = hist.reshape(num_classes, num_classes)
    tp = np.diag(hist).copy()
    fp = hist.sum(axis=0) - tp
    fn = hist.sum(axis=1) - tp
    return ConfusionCounts(tp, fp, fn)


@dataclass
class MetricsReport:
    """Per-class and aggregate quality scores plus model accounting."""

    per_class_iou: list[float]
    per_class_dice: list[float]
    miou: float
    mdice: float
    dsc_mean: float
    hd: float = 0.0
    hd95: float = 0.0
    params: int = 0
    flops: int = 0
    empty_classes: list[int] = field(default_factory=list)
    hd_flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_class_iou": self.per_class_iou,
            "per_class_dice": self.per_class_dice,
            "miou": self.miou,
            "mdice": self.mdice,
            "dsc_mean": self.dsc_mean,
            "hd": self.hd,
            "hd95": self.hd95,
            "params": self.params,
            "flops": self.flops,
            "empty_classes": self.empty_classes,
            "hd_flags": self.hd_flags,
        }


def scores(c: ConfusionCounts, mode: str = "multiclass") -> MetricsReport:
    """IoU/Dice per class and their means from confusion counts.

    A class absent from both prediction and ground truth scores 1 and is
    flagged in ``empty_classes``; dsc_mean skips the background class in
    multiclass mode (foreground Dice in binary mode).
    """
    if mode not in ("binary", "multiclass"):
        raise DataError(f"mode must be 'binary' or 'multiclass', got {mode!r}")
    tp = c.tp.astype(np.float64)
    fp = c.fp.astype(np.float64)
    fn = c.fn.astype(np.float64)
    denom_iou = tp + fp + fn
    empty = denom_iou == 0
    iou = np.where(empty, 1.0, tp / np.maximum(denom_iou, 1.0))
    dice = np.where(empty, 1.0, 2 * tp / np.maximum(2 * tp + fp + fn, 1.0))
    fg = dice[1:] if c.num_classes > 1 else dice
    return MetricsReport(
        per_class_iou=[float(v) for v in iou],
        per_class_dice=[float(v) for v in dice],
        miou=float(iou.mean()),
        mdice=float(dice.mean()),
        dsc_mean=float(fg.mean()) if fg.size else float(dice.mean()),
        empty_classes=[int(i) for i in np.nonzero(empty)[0]],
    )


def boundary_pixels(mask: np.ndarray) -> np.ndarray:
    """(row, col) coordinates of foreground pixels with a 4-neighbour outside
    the foreground; pixels on the image border count as boundary."""
    m = np.asarray(mask).astype(bool)
    if not m.any():
        return np.empty((0, 2), dtype=np.int64)
    padded = np.pad(m, 1, constant_values=False)
    interior = (padded[:-2, 1:-1] & padded[2:, 1:-1]
                & padded[1:-1, :-2] & padded[1:-1, 2:])
    edge = m & ~interior
    return np.argwhere(edge)


class HausdorffResult(NamedTuple):
    distance: float
    flag: str | None


def hausdorff(pred_mask: np.ndarray, gt_mask: np.ndarray,
              percentile: float = 100.0) -> HausdorffResult:
    """Symmetric percentile of boundary-to-boundary Euclidean distances.

    percentile=100 is the classic Hausdorff distance; 95 gives the common
    outlier-robust variant. Degenerate cases: both masks empty -> 0 with a
    flag; exactly one empty -> the image diagonal with a flag.
    """
    if not 0.0 < percentile <= 100.0:
        raise DataError(f"percentile must lie in (0, 100], got {percentile}")
    pred_mask = np.asarray(pred_mask).astype(bool)
    gt_mask = np.asarray(gt_mask).astype(bool)
    if pred_mask.shape != gt_mask.shape:
        raise ShapeError(f"mask shapes differ: {pred_mask.shape} vs {gt_mask.shape}")
    a = boundary_pixels(pred_mask)
    b = boundary_pixels(gt_mask)
    if len(a) == 0 and len(b) == 0:
        return HausdorffResult(0.0, "both-empty")
    if len(a) == 0 or len(b) == 0:
        diag = float(np.hypot(*pred_mask.shape))
        return HausdorffResult(diag, "one-empty")
    d = cdist(a.astype(np.float64), b.astype(np.float64))
    forward = np.percentile(d.min(axis=1), percentile)
    backward = np.percentile(d.min(axis=0), percentile)
    return HausdorffResult(float(max(forward, backward)), None)


# ---------------------------------------------------------------------------
# model accounting


def model_stats(model, input_h: int, input_w: int) -> tuple[int, int]:
    """(learnable parameter count, flops of one forward at the given size).

    Flops come from tracing an actual forward pass, so the number reflects
    exactly what the implementation computes.
    """
    params = model.num_parameters()
    dummy = zeros((1, model.in_channels, input_h, input_w))
    with no_grad(), count_flops() as counter:
        model.forward(dummy)
    return params, counter.total


def axial_attention_macs(axis: str, n: int, c: int, h: int, w: int, heads: int) -> int:
    """Score plus value multiply-accumulates of one single-axis attention.

    Every column (axis="columns") is a length-H sequence attended per head,
    so the cost is N*heads*d*(H*H*W) for scores and the same again for the
    value mix; rows swap the roles of H and W.
    """
    d = c // heads
    if axis == "columns":
        return n * heads * d * (h * h * w + h * h * w)
    if axis == "rows":
        return n * heads * d * (w * w * h + w * w * h)
    raise DataError(f"axis must be 'columns' or 'rows', got {axis!r}")


def mca_attention_macs(n: int, c: int, h: int, w: int, heads: int) -> int:
    """Attention matmul cost of the full cross-axis pair: one columns pass
    plus one rows pass, i.e. proportional to HW*(H+W)."""
    return (axial_attention_macs("columns", n, c, h, w, heads)
            + axial_attention_macs("rows", n, c, h, w, heads))


def dense_attention_macs(n: int, c: int, h: int, w: int, heads: int) -> int:
    """Reference cost of dense self-attention over all HW tokens, i.e.
    proportional to (HW)^2; used to demonstrate the complexity gap."""
    d = c // heads
    t = h * w
    return n * heads * d * (t * t + t * t)
