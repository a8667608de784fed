"""Keyword-constrained text generation: matching, metrics, strategies and experiments."""

__version__ = "0.1.0"
