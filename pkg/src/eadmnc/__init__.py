"""Explainable anomaly detection for mixed continuous/categorical tables."""

__version__ = "0.1.0"
