"""Desk-scale structure-aware detection transformer for dental lesion detection."""

__version__ = "0.1.0"
