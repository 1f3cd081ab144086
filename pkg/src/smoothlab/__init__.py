"""Unsupervised energy-based image smoothing: energy, solvers, a residual FCN and presets."""

__version__ = "0.1.0"
