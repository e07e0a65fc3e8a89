"""Discrete Kahler-Ricci dynamics and energy functionals on model surfaces."""

__version__ = "0.1.0"
