"""Decoy-based privacy for facial lookup, simulated end to end on synthetic people."""

__version__ = "0.1.0"
