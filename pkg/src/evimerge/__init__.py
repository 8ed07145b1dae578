"""Evidential, discrepancy-aware routing of task-vector merges."""

__version__ = "0.1.0"
