"""Bag-of-Color-Features illuminant estimation."""

__version__ = "0.1.0"
