"""Continuous-time diffusion for mixed numerical/categorical time series."""

__version__ = "0.1.0"
