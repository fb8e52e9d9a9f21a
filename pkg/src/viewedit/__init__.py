"""Personalized 3D-aware face video editing on a built-in toy generator."""

__version__ = "0.1.0"
