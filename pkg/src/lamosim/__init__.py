"""Serving-aware performance/power/thermal simulator for stacked-DRAM chiplet systems."""

__version__ = "0.1.0"
