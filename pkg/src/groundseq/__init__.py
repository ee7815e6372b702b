"""Unified text and box token sequences for grounded vision-language tasks."""

__version__ = "0.1.0"
