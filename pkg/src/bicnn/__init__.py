"""Bi-directional CNN classifier for radiology report text."""

__version__ = "0.1.0"
