"""Testbed for federated log anomaly detection."""

__version__ = "0.1.0"
