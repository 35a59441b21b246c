"""Real spherical harmonics basis (degrees 0..3) and its direction Jacobian."""

from __future__ import annotations

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


def n_coeffs(degree: int) -> int:
    if degree not in (0, 1, 2, 3):
        raise ValueError(f"SH degree must be in 0..3, got {degree}")
    return (degree + 1) ** 2


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Basis values for unit directions (N, 3) -> (N, K)."""
    K = n_coeffs(degree)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    B = np.empty((dirs.shape[0], K))
    B[:, 0] = SH_C0
    if degree >= 1:
        B[:, 1] = -SH_C1 * y
        B[:, 2] = SH_C1 * z
        B[:, 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        B[:, 4] = SH_C2[0] * x * y
        B[:, 5] = SH_C2[1] * y * z
        B[:, 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        B[:, 7] = SH_C2[3] * x * z
        B[:, 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        B[:, 9] = SH_C3[0] * y * (3.0 * xx - yy)
        B[:, 10] = SH_C3[1] * x * y * z
        B[:, 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        B[:, 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        B[:, 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        B[:, 14] = SH_C3[5] * z * (xx - yy)
        B[:, 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return B


def sh_basis_jacobian(dirs: np.ndarray, degree: int) -> np.ndarray:
    """d(basis)/d(direction) for unit directions (N, 3) -> (N, K, 3).

    Derivatives treat (x, y, z) as free coordinates; the caller projects
    through the normalization of the view direction.
    """
    K = n_coeffs(degree)
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    x, y, z = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    J = np.zeros((dirs.shape[0], K, 3))
    if degree >= 1:
        J[:, 1, 1] = -SH_C1
        J[:, 2, 2] = SH_C1
        J[:, 3, 0] = -SH_C1
    if degree >= 2:
        J[:, 4, 0] = SH_C2[0] * y
        J[:, 4, 1] = SH_C2[0] * x
        J[:, 5, 1] = SH_C2[1] * z
        J[:, 5, 2] = SH_C2[1] * y
        J[:, 6, 0] = SH_C2[2] * (-2.0 * x)
        J[:, 6, 1] = SH_C2[2] * (-2.0 * y)
        J[:, 6, 2] = SH_C2[2] * (4.0 * z)
        J[:, 7, 0] = SH_C2[3] * z
        J[:, 7, 2] = SH_C2[3] * x
        J[:, 8, 0] = SH_C2[4] * (2.0 * x)
        J[:, 8, 1] = SH_C2[4] * (-2.0 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        J[:, 9, 0] = SH_C3[0] * 6.0 * x * y
        J[:, 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
        J[:, 10, 0] = SH_C3[1] * y * z
        J[:, 10, 1] = SH_C3[1] * x * z
        J[:, 10, 2] = SH_C3[1] * x * y
        J[:, 11, 0] = SH_C3[2] * (-2.0 * x * y)
        J[:, 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
        J[:, 11, 2] = SH_C3[2] * (8.0 * y * z)
        J[:, 12, 0] = SH_C3[3] * (-6.0 * x * z)
        J[:, 12, 1] = SH_C3[3] * (-6.0 * y * z)
        J[:, 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        J[:, 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
        J[:, 13, 1] = SH_C3[4] * (-2.0 * x * y)
        J[:, 13, 2] = SH_C3[4] * (8.0 * x * z)
        J[:, 14, 0] = SH_C3[5] * (2.0 * x * z)
        J[:, 14, 1] = SH_C3[5] * (-2.0 * y * z)
        J[:, 14, 2] = SH_C3[5] * (xx - yy)
        J[:, 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
        J[:, 15, 1] = SH_C3[6] * (-6.0 * x * y)
    return J


def eval_sh(coeffs: np.ndarray, degree: int, view_dir: np.ndarray) -> np.ndarray:
    """Evaluate SH color at a unit view direction with the +0.5 offset,
    clamped at 0 from below.

    ``coeffs`` is (K, C) for K = (degree+1)^2 coefficients and C channels.
    """
    K = n_coeffs(degree)
    coeffs = np.asarray(coeffs, dtype=np.float64)
    if coeffs.ndim == 1:
        coeffs = coeffs[:, None]
    if coeffs.shape[0] < K:
        raise ValueError(f"need {K} coefficients for degree {degree}, got {coeffs.shape[0]}")
    basis = sh_basis(np.asarray(view_dir, dtype=np.float64), degree)[0]
    return np.maximum(basis @ coeffs[:K] + 0.5, 0.0)
