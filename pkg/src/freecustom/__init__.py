"""Toy-scale latent diffusion engine with multi-reference self-attention."""

__version__ = "0.1.0"
