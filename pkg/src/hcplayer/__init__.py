"""Human-centric prior (HcP) cross-attention layers for text-to-image diffusion."""

__version__ = "0.1.0"
