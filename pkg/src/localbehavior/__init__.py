"""Trajectory prediction with retrieved local behavior data."""

__version__ = "0.1.0"
