"""Gradient-guided suggestive annotation for image segmentation."""

__version__ = "0.1.0"
