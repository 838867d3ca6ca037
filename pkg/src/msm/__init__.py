"""Molecular spatial modulation over diffusion-based MIMO channels."""

__version__ = "0.1.0"
