"""Federated graph classification with shared virtual nodes and personalized edge generators."""

__version__ = "0.1.0"
