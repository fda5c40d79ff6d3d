"""Graph contrastive recommendation with hybrid MF and truncated-SVD views."""

__version__ = "0.1.0"
