"""Simulator of a compute-capable last-level cache with xmnmc matrix offloads."""

__version__ = "0.1.0"
