"""Diffusion-based imputation of physical fields trained on incomplete observations."""

__version__ = "0.1.0"
