"""Per-pixel SSIM with an 11x11 Gaussian window (sigma 1.5) and its gradient.

Boundary handling renormalizes the window over the in-image support, which
keeps ssim(a, a) identically 1 up to the edges.  The gradient is the exact
adjoint of the forward computation, used by the D-SSIM loss terms.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
C1 = 0.01 ** 2  # (K1 * L)^2 with L = 1 for unit-range floats
C2 = 0.03 ** 2


def _kernel1d() -> np.ndarray:
    r = np.arange(WINDOW_SIZE) - (WINDOW_SIZE - 1) / 2.0
    k = np.exp(-0.5 * (r / WINDOW_SIGMA) ** 2)
    return k / k.sum()


_K1D = _kernel1d()


def _corr(x: np.ndarray) -> np.ndarray:
    # Zero-padded separable correlation; renormalization happens via _norm.
    out = correlate1d(x, _K1D, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _K1D, axis=1, mode="constant", cval=0.0)


def _norm(shape) -> np.ndarray:
    return _corr(np.ones(shape))


def _filtered_moments(a: np.ndarray, b: np.ndarray):
    Z = _norm(a.shape)
    m1 = _corr(a) / Z
    m2 = _corr(b) / Z
    e1 = _corr(a * a) / Z
    e2 = _corr(b * b) / Z
    e12 = _corr(a * b) / Z
    return Z, m1, m2, e1, e2, e12


def ssim_map_gray(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """SSIM map of two single-channel (h, w) float images in [0, 1]."""
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")
    _, m1, m2, e1, e2, e12 = _filtered_moments(a, b)
    n1 = 2.0 * m1 * m2 + C1
    n2 = 2.0 * (e12 - m1 * m2) + C2
    d1 = m1 * m1 + m2 * m2 + C1
    d2 = (e1 - m1 * m1) + (e2 - m2 * m2) + C2
    return (n1 * n2) / (d1 * d2)


def ssim_map_gray_with_grad(a: np.ndarray, b: np.ndarray, upstream: np.ndarray):
    """SSIM map plus dL/da for per-pixel upstream weights dL/dssim.

    Only the gradient with respect to the first image is produced; the loss
    terms differentiate the render, never the target.
    """
    if a.shape != b.shape or upstream.shape != a.shape:
        raise ValueError("dimension mismatch")
    Z, m1, m2, e1, e2, e12 = _filtered_moments(a, b)
    n1 = 2.0 * m1 * m2 + C1
    n2 = 2.0 * (e12 - m1 * m2) + C2
    d1 = m1 * m1 + m2 * m2 + C1
    d2 = (e1 - m1 * m1) + (e2 - m2 * m2) + C2
    dd = d1 * d2
    ssim = (n1 * n2) / dd

    # Partials of ssim w.r.t. the filtered moments of `a`.
    g_m1 = 2.0 * m2 * (n2 - n1) / dd - 2.0 * m1 * ssim * (1.0 / d1 - 1.0 / d2)
    g_e1 = -ssim / d2
    g_e12 = 2.0 * n1 / dd

    # Adjoint of x -> corr(x)/Z is g -> corr(g/Z) (symmetric kernel).
    def adj(g):
        return _corr(g / Z)

    grad_a = adj(upstream * g_m1) + 2.0 * a * adj(upstream * g_e1) + b * adj(upstream * g_e12)
    return ssim, grad_a
