"""Change-pixel evaluation metrics: mIoU, F1, and AUROC."""

from __future__ import annotations

import numpy as np

from .scene import ChangeMask


def _binary_values(mask, name: str) -> np.ndarray:
    values = mask.values if isinstance(mask, ChangeMask) else np.asarray(mask, dtype=np.float64)
    if not np.all((values == 0.0) | (values == 1.0)):
        raise ValueError(f"{name} must be binary (values in {{0, 1}})")
    return values


def confusion_counts(pred, gt):
    p = _binary_values(pred, "pred") > 0.5
    g = _binary_values(gt, "gt") > 0.5
    if p.shape != g.shape:
        raise ValueError(f"dimension mismatch: {p.shape} vs {g.shape}")
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    return tp, fp, fn


def miou(pred, gt) -> float:
    """Intersection over union of change pixels.

    Both masks empty counts as perfect agreement (1.0); exactly one empty is 0.0.
    """
    tp, fp, fn = confusion_counts(pred, gt)
    union = tp + fp + fn
    if union == 0:
        return 1.0
    return tp / union


def f1(pred, gt) -> float:
    tp, fp, fn = confusion_counts(pred, gt)
    if tp + fp + fn == 0:
        return 1.0
    return 2.0 * tp / (2.0 * tp + fp + fn)


def auroc(scores, gt) -> float:
    """Rank-based (Mann-Whitney) AUROC with midrank tie handling."""
    s = scores.values if isinstance(scores, ChangeMask) else np.asarray(scores, dtype=np.float64)
    g = _binary_values(gt, "gt") > 0.5
    if s.shape != g.shape:
        raise ValueError(f"dimension mismatch: {s.shape} vs {g.shape}")
    s = s.ravel()
    g = g.ravel()
    n_pos = int(g.sum())
    n_neg = g.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("undefined AUROC: ground truth contains a single class")
    from scipy.stats import rankdata

    ranks = rankdata(s)  # midranks for ties
    rank_sum_pos = ranks[g].sum()
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))
