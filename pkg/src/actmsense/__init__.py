"""Sensor placement and state estimation for ramp-metered highways."""

__version__ = "0.1.0"
