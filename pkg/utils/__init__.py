"""Utility package."""
__all__ = ["errors", "images", "logs", "persistence"]
