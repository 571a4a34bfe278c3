"""Lightweight U-Net brain-anomaly segmentation engine in plain numpy."""

__version__ = "0.1.0"
