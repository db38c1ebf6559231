"""Pond water-quality forecasting, anomaly detection and decision-support gauges."""

__version__ = "0.1.0"
