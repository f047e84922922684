"""Stochastic capacity planning for mobile plug-and-play multi-energy microgrids."""

__version__ = "0.1.0"
