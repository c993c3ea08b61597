"""Multi-view VAE out-of-distribution lesion detection at desk scale."""

__version__ = "0.1.0"
