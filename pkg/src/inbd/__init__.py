"""Iterative next boundary detection for concentric ring instance segmentation."""

__version__ = "0.1.0"
