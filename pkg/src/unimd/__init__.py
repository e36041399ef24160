"""Unified moment detection: one query-conditioned detector for action detection and moment retrieval."""

__version__ = "0.1.0"
