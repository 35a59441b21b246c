"""Core scene types: Gaussians, cameras, image buffers, masks, feature maps.

All types are plain dataclasses over numpy arrays.  Parameters that feed the
optimizer (opacities, scales, change channels) are stored pre-activation so
that gradient steps happen in unconstrained space; the activated quantities
are exposed through helper methods.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

N_SH_COEFFS = 16  # degree-3 color SH: (3+1)^2 coefficients per channel


def sigmoid(x):
    return 1.0 / (1.0 + np.exp(-np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix from a (w, x, y, z) quaternion (renormalized internally)."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q)
    if norm < 1e-12:
        raise ValueError("degenerate rotation: zero quaternion")
    w, x, y, z = q / norm
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def quats_to_rotations(q: np.ndarray) -> np.ndarray:
    """Batched quaternion (N,4) -> rotation matrices (N,3,3)."""
    q = np.asarray(q, dtype=np.float64)
    norms = np.linalg.norm(q, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("degenerate rotation: zero quaternion")
    w, x, y, z = (q / norms).T
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def cov3d(rotation, log_scale) -> np.ndarray:
    """3D covariance R S S^T R^T with S = diag(exp(log_scale))."""
    R = quat_to_rotation(rotation)
    s = np.exp(np.asarray(log_scale, dtype=np.float64))
    M = R * s[None, :]
    return M @ M.T


@dataclass
class Gaussian3D:
    position: np.ndarray          # (3,)
    rotation: np.ndarray          # (4,) unit quaternion, (w, x, y, z)
    log_scale: np.ndarray         # (3,)
    opacity_logit: float
    sh_color: np.ndarray          # (16, 3)
    change_dc: float              # pre-activation change magnitude (degree-0)
    change_opacity_logit: float

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.sh_color = np.asarray(self.sh_color, dtype=np.float64).reshape(N_SH_COEFFS, 3)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def change_magnitude(self) -> float:
        return float(sigmoid(self.change_dc))

    @property
    def change_opacity(self) -> float:
        return float(sigmoid(self.change_opacity_logit))

    def covariance(self) -> np.ndarray:
        return cov3d(self.rotation, self.log_scale)


@dataclass
class GaussianCloud:
    """Structure-of-arrays collection of Gaussians.

    ``change_sh`` has one column per change-SH coefficient; column 0 is the
    degree-0 term (``change_dc``).  Extra columns exist only when a higher
    change SH degree is configured for the view-dependence ablation.
    """

    positions: np.ndarray             # (N, 3)
    rotations: np.ndarray             # (N, 4)
    log_scales: np.ndarray            # (N, 3)
    opacity_logits: np.ndarray        # (N,)
    sh_color: np.ndarray              # (N, 16, 3)
    change_sh: np.ndarray             # (N, K), K = (change_degree + 1)^2
    change_opacity_logits: np.ndarray  # (N,)
    scene_extent: float = 1.0

    def __post_init__(self):
        self.positions = np.ascontiguousarray(self.positions, dtype=np.float64)
        self.rotations = np.ascontiguousarray(self.rotations, dtype=np.float64)
        self.log_scales = np.ascontiguousarray(self.log_scales, dtype=np.float64)
        self.opacity_logits = np.ascontiguousarray(self.opacity_logits, dtype=np.float64)
        self.sh_color = np.ascontiguousarray(self.sh_color, dtype=np.float64)
        self.change_sh = np.ascontiguousarray(np.atleast_2d(self.change_sh), dtype=np.float64)
        self.change_opacity_logits = np.ascontiguousarray(
            self.change_opacity_logits, dtype=np.float64
        )

    def __len__(self) -> int:
        return self.positions.shape[0]

    @classmethod
    def from_gaussians(cls, gaussians, scene_extent: float = 1.0) -> "GaussianCloud":
        if not gaussians:
            raise ValueError("empty cloud")
        return cls(
            positions=np.stack([g.position for g in gaussians]),
            rotations=np.stack([g.rotation for g in gaussians]),
            log_scales=np.stack([g.log_scale for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            sh_color=np.stack([g.sh_color for g in gaussians]),
            change_sh=np.array([[g.change_dc] for g in gaussians]),
            change_opacity_logits=np.array([g.change_opacity_logit for g in gaussians]),
            scene_extent=scene_extent,
        )

    def gaussian(self, i: int) -> Gaussian3D:
        return Gaussian3D(
            position=self.positions[i].copy(),
            rotation=self.rotations[i].copy(),
            log_scale=self.log_scales[i].copy(),
            opacity_logit=float(self.opacity_logits[i]),
            sh_color=self.sh_color[i].copy(),
            change_dc=float(self.change_sh[i, 0]),
            change_opacity_logit=float(self.change_opacity_logits[i]),
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            positions=self.positions.copy(),
            rotations=self.rotations.copy(),
            log_scales=self.log_scales.copy(),
            opacity_logits=self.opacity_logits.copy(),
            sh_color=self.sh_color.copy(),
            change_sh=self.change_sh.copy(),
            change_opacity_logits=self.change_opacity_logits.copy(),
            scene_extent=self.scene_extent,
        )

    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    def change_opacities(self) -> np.ndarray:
        return sigmoid(self.change_opacity_logits)

    def normalize_rotations(self) -> None:
        norms = np.linalg.norm(self.rotations, axis=1, keepdims=True)
        if np.any(norms < 1e-12):
            raise ValueError("degenerate rotation: zero quaternion")
        self.rotations /= norms

    def validate(self) -> None:
        if len(self) == 0:
            raise ValueError("empty cloud")
        if not self.scene_extent > 0:
            raise ValueError("scene_extent must be positive")
        norms = np.linalg.norm(self.rotations, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("rotation quaternions must be unit norm")
        if self.sh_color.shape[1:] != (N_SH_COEFFS, 3):
            raise ValueError("sh_color must have 16 coefficients x 3 channels")
        for name, arr in (
            ("positions", self.positions),
            ("log_scales", self.log_scales),
            ("opacity_logits", self.opacity_logits),
            ("sh_color", self.sh_color),
            ("change_sh", self.change_sh),
            ("change_opacity_logits", self.change_opacity_logits),
        ):
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"non-finite values in {name}")


@dataclass
class Camera:
    """Pinhole camera with a world-to-camera pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation_w2c: np.ndarray   # (3, 3)
    translation_w2c: np.ndarray  # (3,)

    def __post_init__(self):
        self.rotation_w2c = np.asarray(self.rotation_w2c, dtype=np.float64).reshape(3, 3)
        self.translation_w2c = np.asarray(self.translation_w2c, dtype=np.float64).reshape(3)
        self.validate()

    def validate(self) -> None:
        R = self.rotation_w2c
        if np.max(np.abs(R.T @ R - np.eye(3))) > 1e-6:
            raise ValueError("rotation_w2c is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise ValueError("rotation_w2c must have determinant +1")
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation_w2c.T @ self.translation_w2c

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation_w2c.T + self.translation_w2c


@dataclass
class ImageBuffer:
    """Row-major float image with values in [0, 1]."""

    data: np.ndarray  # (h, w, c)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise ValueError("image must be (h, w) or (h, w, 1|3)")
        if np.any(self.data < 0.0) or np.any(self.data > 1.0):
            raise ValueError("image values must lie in [0, 1]")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def luma(self) -> np.ndarray:
        """Single-channel (h, w) luma via Rec.601 weights."""
        if self.channels == 1:
            return self.data[:, :, 0]
        return self.data @ np.array([0.299, 0.587, 0.114])


@dataclass
class ChangeMask:
    """Per-pixel change values in [0, 1]; binary masks carry values in {0, 1}."""

    values: np.ndarray  # (h, w)
    binary_flag: bool = False

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("mask values must be (h, w)")
        if np.any(self.values < 0.0) or np.any(self.values > 1.0):
            raise ValueError("mask values must lie in [0, 1]")
        if self.binary_flag and not np.all((self.values == 0.0) | (self.values == 1.0)):
            raise ValueError("binary mask contains non-binary values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


@dataclass
class FeatureMap:
    """Patch-grid feature embeddings of dimension ``dim`` over an s-pixel grid."""

    data: np.ndarray  # (grid_h, grid_w, dim)
    patch_size: int

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("feature map must be (grid_h, grid_w, dim)")
        gh, gw, d = self.data.shape
        if gh < 1 or gw < 1:
            raise ValueError("feature grid dimensions must be >= 1")
        if d < 1:
            raise ValueError("embedding dimension must be >= 1")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")

    @property
    def grid_h(self) -> int:
        return self.data.shape[0]

    @property
    def grid_w(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


def scene_extent_from_cameras(cameras) -> float:
    """Radius of the camera-center bounding sphere (scene scale unit)."""
    centers = np.stack([c.center for c in cameras])
    mid = centers.mean(axis=0)
    radius = float(np.max(np.linalg.norm(centers - mid, axis=1)))
    return max(radius, 1e-6)
