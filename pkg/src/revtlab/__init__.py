"""Encoder-only weight averaging for domain-generalized segmentation, at desk scale."""

__version__ = "0.1.0"
