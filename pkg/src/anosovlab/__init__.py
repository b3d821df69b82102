"""Numerical laboratory for theta-transverse and theta-Anosov subgroups of SL_d(R)."""

__version__ = "0.1.0"
