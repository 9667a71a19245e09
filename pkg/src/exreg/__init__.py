"""Exposure correction as multi-dimensional regression over (i, j, e)."""

__version__ = "0.1.0"
