"""Mask-conditioned latent diffusion for synthesizing table images with controlled row/column structure."""

__version__ = "0.1.0"
