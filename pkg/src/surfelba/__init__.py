"""Sparse-view 2D Gaussian surfel reconstruction with joint camera refinement."""

__version__ = "0.1.0"
