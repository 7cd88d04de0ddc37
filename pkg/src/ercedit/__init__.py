"""Desk-scale unsupervised instruction-based image editing toolkit."""

__version__ = "0.1.0"
