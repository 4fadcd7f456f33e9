"""Recursive filtering for 2-D stochastic systems observed through delayed,
energy-harvesting sensor channels."""

__version__ = "0.1.0"
