"""Federated learning with hybrid batch normalisation, in numpy."""

__version__ = "0.1.0"
