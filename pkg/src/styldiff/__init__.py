"""Desk-scale diffusion style transfer on a procedural toy image domain."""

__version__ = "0.1.0"
