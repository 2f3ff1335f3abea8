"""Nailfold capillaroscopy image and video analysis."""

__version__ = "0.1.0"
