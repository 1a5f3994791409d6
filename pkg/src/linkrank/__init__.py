"""Rank the documents linked from a publication landing page by relevance."""

__version__ = "0.1.0"
