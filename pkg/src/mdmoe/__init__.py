"""Masked diffusion language model with a sparse mixture-of-experts transformer, on a numpy autodiff core."""

from .model import MaskPredictor, ModelConfig
from .sampler import DecodePlan, generate_semi_ar, generate_vanilla

__all__ = ["MaskPredictor", "ModelConfig", "DecodePlan", "generate_semi_ar", "generate_vanilla"]
__version__ = "0.1.0"
