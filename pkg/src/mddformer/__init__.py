"""Multimodal (audio + visual) depression classifier with a cross-fusion transformer."""

__version__ = "0.1.0"
