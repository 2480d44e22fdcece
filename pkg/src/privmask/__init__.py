"""Logistic-regression inference on matrix-masked, noise-added data."""

__version__ = "0.1.0"
