"""Differentially private SGD with Gaussian loss smoothing, plus the tools to study it."""

__version__ = "0.1.0"
