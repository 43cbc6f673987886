"""Detect, reconstruct and audit on-device ML pipelines from runtime traces."""

__version__ = "0.1.0"
