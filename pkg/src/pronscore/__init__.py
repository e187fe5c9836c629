"""Weakly supervised phoneme-level pronunciation scoring."""

__version__ = "0.1.0"
