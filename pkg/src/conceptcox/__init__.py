"""Concept-based Cox risk models learned from under-coded anchors."""

__version__ = "0.1.0"
