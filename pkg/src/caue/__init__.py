"""Concept-aware patient embeddings from clinical notes."""

__version__ = "0.1.0"
