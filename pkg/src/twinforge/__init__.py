"""Federated digital-twin orchestration: catalog, lifecycle, execution, sync."""

__version__ = "0.1.0"
