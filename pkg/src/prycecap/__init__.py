"""Constrained-efficient market structures with privately informed firms."""

__version__ = "0.1.0"
