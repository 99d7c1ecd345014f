"""Synthetic tactile-image benchmark for colorectal polyp phantom classification."""

__version__ = "0.1.0"
