"""Fractional-Brownian-motion SDE laboratory."""
__version__ = "0.1.0"
