"""Hierarchical contrastive dehazing."""

__version__ = "0.1.0"
