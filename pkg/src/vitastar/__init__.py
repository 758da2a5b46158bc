"""Learned guidance maps for grid A* with a vision-transformer encoder."""

__version__ = "0.1.0"
