"""Budgeted relational multi-instance learning."""

__version__ = "0.1.0"
