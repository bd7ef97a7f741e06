"""Behavior-tree supervised multi-sensor vehicle localisation."""

__version__ = "0.1.0"
