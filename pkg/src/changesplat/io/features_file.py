"""CSFM: a minimal binary container for precomputed patch-grid feature maps.

Layout: magic ``CSFM``, then four little-endian u32 fields (grid_h, grid_w,
dim, patch_size), then grid_h * grid_w * dim little-endian float32 values.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..scene import FeatureMap

MAGIC = b"CSFM"
_HEADER = struct.Struct("<4sIIII")


class FeatureFileError(ValueError):
    pass


def save_feature_map(fmap: FeatureMap, path) -> None:
    with open(path, "wb") as f:
        f.write(_HEADER.pack(MAGIC, fmap.grid_h, fmap.grid_w, fmap.dim, fmap.patch_size))
        f.write(np.ascontiguousarray(fmap.data, dtype="<f4").tobytes())


def load_feature_map(path) -> FeatureMap:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as e:
        raise FeatureFileError(f"cannot read {path}: {e}") from e
    if len(raw) < _HEADER.size:
        raise FeatureFileError(f"{path.name}: truncated header")
    magic, grid_h, grid_w, dim, patch_size = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise FeatureFileError(f"{path.name}: bad magic {magic!r}, expected {MAGIC!r}")
    if grid_h < 1 or grid_w < 1 or dim < 1 or patch_size < 1:
        raise FeatureFileError(f"{path.name}: invalid header fields")
    expected = grid_h * grid_w * dim
    found = (len(raw) - _HEADER.size) // 4
    if found != expected or (len(raw) - _HEADER.size) % 4 != 0:
        raise FeatureFileError(
            f"{path.name}: expected {expected} float32 values, found {found}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise FeatureFileError(f"{path.name}: non-finite feature values")
    return FeatureMap(data=data.reshape(grid_h, grid_w, dim), patch_size=int(patch_size))
