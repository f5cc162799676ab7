"""Novelty-driven test selection for functional coverage closure."""

__version__ = "0.1.0"
