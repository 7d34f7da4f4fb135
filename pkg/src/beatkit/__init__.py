"""Frequency-domain rPPG estimation with zoomed complex attention."""

__version__ = "0.1.0"
