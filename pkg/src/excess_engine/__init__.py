"""Excess mortality estimation from heterogeneous mortality data."""

__version__ = "0.1.0"
