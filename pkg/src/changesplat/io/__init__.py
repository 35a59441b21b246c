from .colmap import (
    ColmapCamera,
    ColmapError,
    ColmapImage,
    ColmapModel,
    parse_colmap_model,
    write_colmap_model,
)
from .features_file import FeatureFileError, load_feature_map, save_feature_map
from .ply import CHANGE_INIT_ACTIVATED, SplatIOError, read_splat_ply, write_splat_ply

__all__ = [
    "ColmapCamera",
    "ColmapError",
    "ColmapImage",
    "ColmapModel",
    "parse_colmap_model",
    "write_colmap_model",
    "FeatureFileError",
    "load_feature_map",
    "save_feature_map",
    "CHANGE_INIT_ACTIVATED",
    "SplatIOError",
    "read_splat_ply",
    "write_splat_ply",
]
