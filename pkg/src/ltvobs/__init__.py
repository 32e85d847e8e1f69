"""Uniform observability tools for linear time-varying systems and range-based localization."""

__version__ = "0.1.0"
