"""Calibrated uncertainty for social-force pedestrian trajectory forecasts."""

__version__ = "0.1.0"
