"""Sparse modern Hopfield networks and the BiSHop tabular model."""

__version__ = "0.1.0"
