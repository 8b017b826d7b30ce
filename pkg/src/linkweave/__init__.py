"""Aggregate several unreliable links into one reliable byte stream."""

__version__ = "0.1.0"
