"""LLM serving gateway, dynamic replica router and simulated engine."""

__version__ = "0.1.0"
