"""Pivot-constrained visual-inertial localization."""

__version__ = "0.1.0"
