"""Anomaly detection by quantized-memory reconstruction plus measured deformation."""

__version__ = "0.1.0"
