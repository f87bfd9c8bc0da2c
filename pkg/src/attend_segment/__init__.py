"""Active semantic segmentation from a budget of retina glimpses."""
from .estimator import ActiveSegmenter
from .model import ActiveSegmentationNet, ModelConfig, StepOutputs
from .retina import GlimpseSpec, RetinaConfig, analytic_pixel_count, budget_ratio, extract_glimpse

__all__ = [
    "ActiveSegmenter",
    "ActiveSegmentationNet",
    "GlimpseSpec",
    "ModelConfig",
    "RetinaConfig",
    "StepOutputs",
    "analytic_pixel_count",
    "budget_ratio",
    "extract_glimpse",
]
__version__ = "0.1.0"
