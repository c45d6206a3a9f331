"""Retrieval-augmented precursor prediction for inorganic synthesis."""

__version__ = "0.1.0"
