"""Hierarchical object recognition by pipeline typologies."""

__version__ = "0.1.0"
