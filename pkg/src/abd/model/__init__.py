"""Differentiable core: autodiff, selective scan, model layers, loss."""

from .autodiff import GraphConsumedError, Tensor
from .layers import ModelConfig
from .scan import ScanError, selective_scan

__all__ = ["GraphConsumedError", "ModelConfig", "ScanError", "Tensor", "selective_scan"]
