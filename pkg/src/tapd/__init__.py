"""Observation-adaptive trajectory forecasting on synthetic driving scenes."""

__version__ = "0.1.0"
