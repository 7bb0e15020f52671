"""Forgetting analysis and group-robust alignment on small synthetic models."""

__version__ = "0.1.0"
