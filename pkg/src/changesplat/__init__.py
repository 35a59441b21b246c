"""changesplat: label-free multi-view scene change localization built on a
change-aware 3D Gaussian splatting representation."""

__version__ = "0.1.0"

from .scene import (
    Camera,
    ChangeMask,
    FeatureMap,
    Gaussian3D,
    GaussianCloud,
    ImageBuffer,
    cov3d,
    quat_to_rotation,
)

__all__ = [
    "Camera",
    "ChangeMask",
    "FeatureMap",
    "Gaussian3D",
    "GaussianCloud",
    "ImageBuffer",
    "cov3d",
    "quat_to_rotation",
]
