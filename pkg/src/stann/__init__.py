"""Spatiotemporal adaptive forecaster with ACTM variable-order attention."""

__version__ = "0.1.0"
