"""Hilbert-scan state-space forecasting for gridded sea-ice-like data."""

__version__ = "0.1.0"
