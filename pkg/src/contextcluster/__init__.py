"""Context clusters: an image backbone that treats pixels as an unordered point set."""
from .model import ModelConfig, PRESETS, build_model, count_macs, count_parameters, preset
from .points import GridMeta, PointSet, image_to_points

__version__ = "0.1.0"

__all__ = [
    "GridMeta", "ModelConfig", "PRESETS", "PointSet", "build_model", "count_macs",
    "count_parameters", "image_to_points", "preset",
]
