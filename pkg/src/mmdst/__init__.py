"""Desk-scale lab for multimodal dialogue state tracking over synthetic videos."""

__version__ = "0.1.0"
