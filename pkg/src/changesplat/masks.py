"""Change-mask construction: SSIM structure masks, feature-difference masks,
candidate-mask fusion, alpha filtering of unseen regions, and binarization."""

from __future__ import annotations

import numpy as np

from . import ssim
from .scene import ChangeMask, FeatureMap, ImageBuffer

SSIM_CHANGE_THRESHOLD = 0.5    # pixels with SSIM <= 0.5 count as changed
FEATURE_CHANGE_THRESHOLD = 0.5  # normalized feature diffs below 0.5 are zeroed
ALPHA_SEEN_THRESHOLD = 0.5      # rendered alpha >= 0.5 marks reconstructed area


def ssim_map(a: ImageBuffer, b: ImageBuffer) -> np.ndarray:
    """Per-pixel SSIM map (h, w) with values in [-1, 1].

    Three-channel inputs are converted to Rec.601 luma first.
    """
    if (a.height, a.width) != (b.height, b.width):
        raise ValueError(
            f"dimension mismatch: {a.height}x{a.width} vs {b.height}x{b.width}"
        )
    return ssim.ssim_map_gray(a.luma(), b.luma())


def structure_mask(i_ren: ImageBuffer, i_inf: ImageBuffer) -> ChangeMask:
    """Binary mask of low-SSIM (structurally changed) pixels."""
    s = ssim_map(i_ren, i_inf)
    return ChangeMask((s <= SSIM_CHANGE_THRESHOLD).astype(np.float64), binary_flag=True)


def _catmullrom_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) Catmull-Rom (a = -0.5) resampling matrix, clamped edges."""
    a = -0.5
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    base = np.floor(src).astype(int)
    t = src - base
    W = np.zeros((n_out, n_in))
    for k in range(-1, 3):
        d = np.abs(t - k)
        w = np.where(
            d <= 1.0,
            (a + 2.0) * d**3 - (a + 3.0) * d**2 + 1.0,
            np.where(d < 2.0, a * d**3 - 5.0 * a * d**2 + 8.0 * a * d - 4.0 * a, 0.0),
        )
        idx = np.clip(base + k, 0, n_in - 1)
        np.add.at(W, (np.arange(n_out), idx), w)
    return W


def upsample_bicubic(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Catmull-Rom bicubic resampling of a (h, w) array with clamped edges."""
    Wr = _catmullrom_weights(grid.shape[0], out_h)
    Wc = _catmullrom_weights(grid.shape[1], out_w)
    return Wr @ grid @ Wc.T


def feature_diff_mask(f_ren: FeatureMap, f_inf: FeatureMap, out_w: int, out_h: int) -> ChangeMask:
    """Feature-aware change mask: summed absolute feature differences,
    min-max normalized per image, bicubic-upsampled, sub-threshold zeroed."""
    if f_ren.data.shape != f_inf.data.shape:
        raise ValueError(
            f"dimension mismatch: {f_ren.data.shape} vs {f_inf.data.shape}"
        )
    diff = np.abs(f_ren.data - f_inf.data).sum(axis=2)
    lo, hi = diff.min(), diff.max()
    if hi - lo < 1e-12:
        # No differential signal anywhere: report no change.
        return ChangeMask(np.zeros((out_h, out_w)), binary_flag=False)
    norm = (diff - lo) / (hi - lo)
    up = np.clip(upsample_bicubic(norm, out_h, out_w), 0.0, 1.0)
    up[up < FEATURE_CHANGE_THRESHOLD] = 0.0
    return ChangeMask(up, binary_flag=False)


def combine_masks(m_f: ChangeMask, m_s: ChangeMask) -> ChangeMask:
    """Candidate mask: elementwise product of feature and structure masks."""
    if m_f.values.shape != m_s.values.shape:
        raise ValueError(
            f"dimension mismatch: {m_f.values.shape} vs {m_s.values.shape}"
        )
    values = m_f.values * m_s.values
    return ChangeMask(values, binary_flag=m_f.binary_flag and m_s.binary_flag)


def filter_unseen(m_ren: ChangeMask, a_ren: ImageBuffer) -> ChangeMask:
    """Zero out change in unreconstructed regions (rendered alpha below 0.5)."""
    alpha = a_ren.data[:, :, 0]
    if m_ren.values.shape != alpha.shape:
        raise ValueError(
            f"dimension mismatch: {m_ren.values.shape} vs {alpha.shape}"
        )
    seen = (alpha >= ALPHA_SEEN_THRESHOLD).astype(np.float64)
    return ChangeMask(m_ren.values * seen, binary_flag=m_ren.binary_flag)


def binarize(m: ChangeMask, threshold: float = 0.5) -> ChangeMask:
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    return ChangeMask((m.values >= threshold).astype(np.float64), binary_flag=True)
