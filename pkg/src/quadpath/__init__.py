"""Quadtree decomposition of large RGB images into multi-resolution patch bags
for attention-based multiple-instance learning."""

from .bags import Bag, ExtractionMode, builtin_features, extract_instances, otsu_threshold, tissue_mask
from .colorspace import RUIFROK_HE, ColorSpace, StainMatrix, deconvolve_haematoxylin, to_blue_ratio, to_luminance
from .config import TOOL_VERSION as __version__
from .config import PipelineConfig, load_config
from .criterion import CriterionConfig, CriterionKind, CriterionStats, calibrate_threshold, entropy, mean_pixel
from .evaluate import accuracy, auroc, run_cv
from .heatmap import HeatmapConfig, attention_map, render_overlay
from .imageio import load_image, load_manifest, read_features, save_image, write_features
from .mil import AMILModel, CLAMModel, TrainConfig, forward_amil, forward_clam, loss_and_gradients, train
from .quadtree import Quadtree, QuadtreeConfig, build_quadtree, deserialize_tree, serialize_tree

__all__ = [
    "__version__",
    "Bag",
    "ExtractionMode",
    "builtin_features",
    "extract_instances",
    "otsu_threshold",
    "tissue_mask",
    "RUIFROK_HE",
    "ColorSpace",
    "StainMatrix",
    "deconvolve_haematoxylin",
    "to_blue_ratio",
    "to_luminance",
    "PipelineConfig",
    "load_config",
    "CriterionConfig",
    "CriterionKind",
    "CriterionStats",
    "calibrate_threshold",
    "entropy",
    "mean_pixel",
    "accuracy",
    "auroc",
    "run_cv",
    "HeatmapConfig",
    "attention_map",
    "render_overlay",
    "load_image",
    "load_manifest",
    "read_features",
    "save_image",
    "write_features",
    "AMILModel",
    "CLAMModel",
    "TrainConfig",
    "forward_amil",
    "forward_clam",
    "loss_and_gradients",
    "train",
    "Quadtree",
    "QuadtreeConfig",
    "build_quadtree",
    "deserialize_tree",
    "serialize_tree",
]
