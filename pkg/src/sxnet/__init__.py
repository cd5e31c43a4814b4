"""Shuffle-exchange sequence networks with a self-contained numeric core."""

__version__ = "0.1.0"
