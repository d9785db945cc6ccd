"""Federated multi-site authorization and security plane."""

__version__ = "0.1.0"
