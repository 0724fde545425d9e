"""Optimal sensor placement for sparse emission-source inversion."""

__version__ = "0.1.0"
