"""Unguided depth super-resolution through projected normalized coordinate code (PNCC) images."""

__version__ = "0.1.0"
