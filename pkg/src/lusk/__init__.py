"""Unsupervised keypoint detection for ultrasound-like video."""

__version__ = "0.1.0"
