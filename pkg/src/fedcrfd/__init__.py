"""Federated multi-contrast MRI reconstruction with cross-client latent consistency."""

__version__ = "0.1.0"
