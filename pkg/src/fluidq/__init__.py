"""Fluid models of the many-server queue with abandonment."""

__version__ = "0.1.0"
