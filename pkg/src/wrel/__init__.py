"""Weakly referring expression learning for referring segmentation."""

__version__ = "0.1.0"
