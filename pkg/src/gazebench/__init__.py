"""Desk-scale neck-mounted gaze estimation workbench."""

__version__ = "0.1.0"
