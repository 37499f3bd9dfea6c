"""Desk-scale lab for ground-truth-guided BEV 3D object detection."""

__version__ = "0.1.0"

from .autodiff import Graph, ShapeError, Tensor  # noqa: F401
