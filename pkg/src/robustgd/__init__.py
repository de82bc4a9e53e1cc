"""Gradient descent on one-hidden-layer networks over clustered data with corrupted labels."""

__version__ = "0.1.0"
