"""User-guided conditional VAE with pattern-dictionary covariances."""

__version__ = "0.1.0"
