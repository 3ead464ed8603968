"""Compose advertisement edit protocols from product info and clip pools, and score them."""

__version__ = "0.1.0"
