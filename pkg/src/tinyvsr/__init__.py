"""Desk-scale one-step video restoration with per-head attention routing."""

__version__ = "0.1.0"
