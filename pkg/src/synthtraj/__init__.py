"""Generative modeling, auditing, and evaluation of synthetic clinical event sequences."""

__version__ = "0.1.0"
