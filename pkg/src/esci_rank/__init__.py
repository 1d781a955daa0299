"""Query-product relevance ranking with a small from-scratch cross-encoder."""

__version__ = "0.1.0"
