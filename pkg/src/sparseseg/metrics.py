"""Dice overlap metrics shared by training evaluation and whole-volume scoring."""

from __future__ import annotations

import numpy as np


def dice_per_class(pred: np.ndarray, gt: np.ndarray, class_count: int) -> dict[int, float]:
    """dice_k = 2|P_k & G_k| / (|P_k| + |G_k|); classes absent from both are skipped."""
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    if pred.shape != gt.shape:
        raise ValueError("prediction/ground-truth size mismatch")
    out = {}
    for k in range(class_count):
        p = pred == k
        g = gt == k
        denom = int(p.sum()) + int(g.sum())
        if denom == 0:
            continue
        out[k] = 2.0 * int((p & g).sum()) / denom
    return out


def mean_foreground_dice(per_class: dict[int, float]) -> float:
    fg = [v for k, v in per_class.items() if k != 0]
    return float(np.mean(fg)) if fg else float("nan")
