"""Protuberance-aware kidney tumor segmentation, desk scale."""

__version__ = "0.1.0"
