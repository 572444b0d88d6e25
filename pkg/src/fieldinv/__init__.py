"""Compositional generative feature fields with a feed-forward latent inverter."""

__version__ = "0.1.0"
