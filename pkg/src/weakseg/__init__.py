"""Weak-label surface segmentation: autodiff, models, synthetic data and the hypothesis lab."""

__version__ = "0.1.0"
