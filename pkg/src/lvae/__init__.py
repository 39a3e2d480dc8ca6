"""Longitudinal VAE with an additive Gaussian-process latent prior."""

__version__ = "0.1.0"
