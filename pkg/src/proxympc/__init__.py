"""Uncertainty-aware control of complex simulated systems via simple proxy models."""

__version__ = "0.1.0"
