"""Desk-scale decoder-only time-series forecaster with quantile outputs."""

__version__ = "0.1.0"
