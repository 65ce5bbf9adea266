"""Segmentation quality measures: per-region dice and voxel error rate.

Conventions: a region empty in the truth is excluded from the mean dice
(undefined); a region empty in the prediction but present in the truth
scores 0.  The error-rate denominator is the truth foreground.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .volume import LabelVolume


@dataclass
class EvalReport:
    per_region_dice: list[float | None]  # index l-1 holds region l; None if undefined
    mean_dice: float
    error_rate: float
    true_counts: np.ndarray
    pred_counts: np.ndarray

    def to_csv(self) -> str:
        lines = ["region,dice,true_count,pred_count"]
        for i, d in enumerate(self.per_region_dice):
            dice_s = "" if d is None else repr(d)
            lines.append(f"{i + 1},{dice_s},{self.true_counts[i]},{self.pred_counts[i]}")
        lines.append(f"mean_dice={self.mean_dice!r} error_rate={self.error_rate!r}")
        return "\n".join(lines) + "\n"


def _check_dims(pred: LabelVolume, truth: LabelVolume):
    if pred.dims != truth.dims:
        raise ValueError(f"dims mismatch: pred {pred.dims} vs truth {truth.dims}")


def dice(pred: LabelVolume, truth: LabelVolume, region: int) -> float:
    """2|A n B| / (|A| + |B|) for one region id; 0 when both sets are empty."""
    _check_dims(pred, truth)
    a = pred.labels == region
    b = truth.labels == region
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 0.0
    return 2.0 * int((a & b).sum()) / denom


def error_rate(pred: LabelVolume, truth: LabelVolume, mask: np.ndarray | None = None) -> float:
    """Fraction of masked voxels where the labels disagree."""
    _check_dims(pred, truth)
    if mask is None:
        mask = truth.labels > 0
    total = int(mask.sum())
    if total == 0:
        raise ValueError("empty evaluation mask")
    wrong = int((pred.labels[mask] != truth.labels[mask]).sum())
    return wrong / total


def evaluate(pred: LabelVolume, truth: LabelVolume, n_regions: int) -> EvalReport:
    """Per-region dice, their mean over regions present in the truth, and
    the error rate over truth-foreground voxels."""
    _check_dims(pred, truth)
    true_counts = np.bincount(truth.labels.ravel(), minlength=n_regions + 1)[1:]
    pred_counts = np.bincount(
        pred.labels.ravel(), minlength=n_regions + 1
    )[1 : n_regions + 1]
    per_region: list[float | None] = []
    defined = []
    for region in range(1, n_regions + 1):
        if true_counts[region - 1] == 0:
            per_region.append(None)
            continue
        d = dice(pred, truth, region)
        per_region.append(d)
        defined.append(d)
    if not defined:
        raise ValueError("no region present in the truth volume")
    return EvalReport(
        per_region_dice=per_region,
        mean_dice=float(np.mean(defined)),
        error_rate=error_rate(pred, truth),
        true_counts=true_counts,
        pred_counts=pred_counts,
    )
