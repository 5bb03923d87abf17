"""Discrete-event blockchain network simulator with fork-based anomaly detection."""

__version__ = "0.1.0"
