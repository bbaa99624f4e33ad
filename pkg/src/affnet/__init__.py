"""Adaptive feature fusion network for appearance-based gaze estimation on mobile devices."""
from .kernels import BACKEND
from .model import ModelConfig, build, forward, shape_trace, tiny_config, width_scaled
from .tensor import Tensor, backward, no_grad

__version__ = "0.1.0"
__all__ = ["BACKEND", "ModelConfig", "Tensor", "backward", "build", "forward", "no_grad",
           "shape_trace", "tiny_config", "width_scaled"]
