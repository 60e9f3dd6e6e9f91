"""Flexible masked autoencoder for heterogeneous battery time series."""

__version__ = "0.1.0"
