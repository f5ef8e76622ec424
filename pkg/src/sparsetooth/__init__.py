"""Weakly-supervised tooth point-cloud segmentation from one labeled point per tooth."""

__version__ = "0.1.0"
