"""Desk-scale laboratory for classifier-guided diffusion sampling on Gaussian mixtures."""

__version__ = "0.1.0"
