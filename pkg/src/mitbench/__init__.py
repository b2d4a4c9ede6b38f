"""Magnetic induction tomography reconstruction workbench."""

__version__ = "0.1.0"
