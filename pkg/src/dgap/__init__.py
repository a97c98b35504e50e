"""Gradient-guided amplitude mixing for domain shift, at desk scale."""

__version__ = "0.1.0"
