"""Transformer encoder + progressive locality decoder for binary
segmentation, built on an in-repo tape autodiff and netpbm data plumbing."""

from .decoder import PLDConfig
from .encoder import EncoderConfig
from .model import SSFormer
from .tensor import Tape, Tensor

__version__ = "0.1.0"

__all__ = ["EncoderConfig", "PLDConfig", "SSFormer", "Tape", "Tensor", "__version__"]
