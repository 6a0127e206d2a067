"""Interpretability workbench for a synthetic grid-world vision-language task."""

__version__ = "0.1.0"
