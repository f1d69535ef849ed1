"""Fiber orientation and conduction velocity inference from sparse activation maps."""

__version__ = "0.1.0"
