"""Joint latent-variable survival modeling for sparse longitudinal records."""

__version__ = "0.1.0"
