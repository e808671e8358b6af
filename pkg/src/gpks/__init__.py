"""Gaussian-process regression with greedy compositional kernel search."""

__version__ = "0.1.0"
