"""Differentially private, communication-efficient distributed mean estimation."""

__version__ = "0.1.0"
