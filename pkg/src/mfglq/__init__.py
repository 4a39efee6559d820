"""Indefinite LQ mean-field games with common noise under partial observation."""

__version__ = "0.1.0"
