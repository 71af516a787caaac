"""Desk-scale scaling-law lab for masked-reconstruction expression models."""

__version__ = "0.1.0"
