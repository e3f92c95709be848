"""Hierarchical action classification toolkit.

A small, self-contained study platform for three training-time mechanisms on
video classifiers: skeleton-guided input cropping, confusion-driven
superclass hierarchies with per-stack heads, and iterative magnitude-based
filter pruning.  Built on an internal float64 autodiff engine; no external
deep-learning framework.
"""

from .tensor import Tensor, Tape, backward, check_gradients

__all__ = ["Tensor", "Tape", "backward", "check_gradients"]
__version__ = "0.1.0"
