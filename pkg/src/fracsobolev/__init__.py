"""Fractional Sobolev seminorms and K-functionals on non-smooth planar domains."""

__version__ = "0.1.0"
