"""Feature extraction: a built-in patch-statistics descriptor plus ingestion
of precomputed per-image feature files (CSFM containers).

The built-in extractor is a deliberately simple stand-in for a pretrained
vision backbone: per patch it mixes color statistics and a gradient
orientation histogram so that both appearance and structural changes show up
in the feature-difference mask at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .scene import FeatureMap, ImageBuffer

BUILTIN_DIM = 12  # mean RGB (3) + luma std (1) + 8-bin orientation histogram
N_ORIENT_BINS = 8


@dataclass
class FeatureExtractorSpec:
    kind: str = "builtin-patchstat"      # or "external-files"
    patch_size: int = 8
    dim: int = BUILTIN_DIM
    external_dir: str | None = None      # directory of <image_id>.csfm files

    def __post_init__(self):
        if self.kind not in ("builtin-patchstat", "external-files"):
            raise ValueError(f"unknown extractor kind {self.kind!r}")
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.kind == "external-files" and self.external_dir is None:
            raise ValueError("external-files extractor needs external_dir")


def _patch_descriptor(patch_rgb: np.ndarray, luma: np.ndarray) -> np.ndarray:
    desc = np.empty(BUILTIN_DIM)
    desc[0:3] = patch_rgb.reshape(-1, 3).mean(axis=0)
    desc[3] = luma.std()
    # Gradient orientation histogram, magnitude weighted.  Gradients are
    # computed inside the patch so the descriptor stays patch-local.
    gy, gx = np.gradient(luma)
    mag = np.hypot(gx, gy).ravel()
    total = mag.sum()
    if total < 1e-12:
        desc[4:] = 0.0
    else:
        ang = np.arctan2(gy, gx).ravel()  # [-pi, pi)
        bins = np.floor((ang + np.pi) / (2 * np.pi) * N_ORIENT_BINS).astype(int)
        bins = np.clip(bins, 0, N_ORIENT_BINS - 1)
        hist = np.bincount(bins, weights=mag, minlength=N_ORIENT_BINS)
        desc[4:] = hist / total
    return desc


def extract(spec: FeatureExtractorSpec, img: ImageBuffer, image_id: str | None = None) -> FeatureMap:
    """Per-patch feature map of ``img`` under the given extractor spec.

    ``image_id`` selects the CSFM file in external-files mode.
    """
    if spec.kind == "external-files":
        return _load_external(spec, img, image_id)

    s = spec.patch_size
    if img.height < s or img.width < s:
        raise ValueError(f"image {img.width}x{img.height} smaller than one {s}x{s} patch")
    gh, gw = img.height // s, img.width // s
    rgb = img.data if img.channels == 3 else np.repeat(img.data, 3, axis=2)
    luma = img.luma()
    data = np.empty((gh, gw, BUILTIN_DIM))
    for i in range(gh):
        for j in range(gw):
            ys, xs = slice(i * s, (i + 1) * s), slice(j * s, (j + 1) * s)
            data[i, j] = _patch_descriptor(rgb[ys, xs], luma[ys, xs])
    return FeatureMap(data=data, patch_size=s)


def _load_external(spec: FeatureExtractorSpec, img: ImageBuffer, image_id: str | None) -> FeatureMap:
    from .io.features_file import load_feature_map

    if image_id is None:
        raise ValueError("external-files extraction requires an image_id")
    path = Path(spec.external_dir) / f"{image_id}.csfm"
    if not path.is_file():
        raise FileNotFoundError(f"missing feature file {path}")
    fmap = load_feature_map(path)
    exp_gh = img.height // fmap.patch_size
    exp_gw = img.width // fmap.patch_size
    if (fmap.grid_h, fmap.grid_w) != (exp_gh, exp_gw):
        raise ValueError(
            f"{path.name}: grid {fmap.grid_h}x{fmap.grid_w} does not match "
            f"image {img.width}x{img.height} at patch size {fmap.patch_size} "
            f"(expected {exp_gh}x{exp_gw})"
        )
    return fmap
