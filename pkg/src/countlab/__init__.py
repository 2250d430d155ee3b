"""Desk-scale counting interpretability lab: toy transformers, patching, CountScope probes."""

__version__ = "0.1.0"
