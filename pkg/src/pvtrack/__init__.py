"""Unified power-setpoint tracking for utility-scale PV arrays."""

__version__ = "0.1.0"
