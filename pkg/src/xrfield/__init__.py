"""Sparse-view X-ray reconstruction toolkit."""

__version__ = "0.1.0"
