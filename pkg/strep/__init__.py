"""Unsupervised global registration of temporal point cloud sequences."""

__version__ = "0.1.0"
