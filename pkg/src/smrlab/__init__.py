"""Numerical laboratory for parabolic SPDE systems with rough random coefficients."""
__version__ = "0.1.0"
