"""Batch figure rendering for mfglq CSV outputs."""

__version__ = "0.1.0"
