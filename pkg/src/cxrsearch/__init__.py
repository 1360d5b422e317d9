"""Metric-learning chest radiograph retrieval, diagnosis and transfer."""

__version__ = "0.1.0"
