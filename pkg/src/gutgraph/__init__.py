"""Unsupervised multi-relation graph embeddings for microbial abundance data."""

__version__ = "0.1.0"
