"""Transformer segmentation of general and transparent objects, with an assistive decision engine."""

from .config import ConfigError, ModelConfig, RunConfig, preset
from .decoder import Trans4Trans
from .tensor import Tensor, no_grad

__all__ = ["ConfigError", "ModelConfig", "RunConfig", "Tensor", "Trans4Trans", "no_grad", "preset"]
__version__ = "0.1.0"
