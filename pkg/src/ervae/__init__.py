"""Manifold-valued latent VAEs through a fixed embedding of a flat hidden space."""

__version__ = "0.1.0"
