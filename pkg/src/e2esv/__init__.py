"""End-to-end attention-based text-dependent speaker verification."""

__version__ = "0.1.0"
