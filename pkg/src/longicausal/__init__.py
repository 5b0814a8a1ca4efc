"""Doubly robust marginal-structural-model estimation for longitudinal data."""

__version__ = "0.1.0"
