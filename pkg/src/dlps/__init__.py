"""Photometric stereo with adaptive dictionary-learning regularization."""

__version__ = "0.1.0"
