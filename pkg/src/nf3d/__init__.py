"""Compressing 3D geometry and colors by overfitting small neural distance fields."""

__version__ = "0.1.0"
