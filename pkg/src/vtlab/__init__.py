"""Desk-scale laboratory for contrasting video-transformer attention mechanisms."""

__version__ = "0.1.0"
