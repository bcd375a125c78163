"""Compact caption models: radix-encoded vocabularies and multi-head attention on a numpy autodiff core."""

__version__ = "0.1.0"
