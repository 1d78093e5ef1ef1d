"""Gaussian-splat maps, differentiable rendering and camera localization on CPU."""

__version__ = "0.1.0"
