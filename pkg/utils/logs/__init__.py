"""Logging utilities."""
__all__ = ["metrics"]
