"""Ability extraction and cross-lingual transfer by checkpoint arithmetic."""

__version__ = "0.1.0"
