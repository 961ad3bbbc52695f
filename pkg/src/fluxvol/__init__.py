"""Flux and volume computations for integrable magnetic fields from field-line orbits."""

__version__ = "0.1.0"
