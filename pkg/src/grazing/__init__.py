"""Grazing detection from field image time series, with an inspection planner."""

__version__ = "0.1.0"
