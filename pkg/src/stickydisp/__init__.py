"""Simulation and analysis of the sticky dispersion process and its mean-field limit."""

__version__ = "0.1.0"
