"""Sparse-sensor rooftop wind field reconstruction benchmark toolkit."""

__version__ = "0.1.0"
