"""Numerics for the boundary local time of one-dimensional super-Brownian motion."""

__version__ = "0.1.0"
