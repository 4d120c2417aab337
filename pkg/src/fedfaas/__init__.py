"""Federated function-as-a-service toolkit for data-proximate FITS processing."""

__version__ = "0.1.0"
