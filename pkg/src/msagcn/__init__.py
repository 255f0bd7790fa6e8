"""Multiscale adaptive graph convolution network for gait emotion
recognition, built on a small from-scratch autodiff core."""

__version__ = "0.1.0"

from .tensor import Tensor, Parameter, no_grad  # noqa: F401
from .model import MsaGcn, MsaGcnConfig, StageConfig, build  # noqa: F401
from .graphs import ScalePyramid, default_pyramid  # noqa: F401
