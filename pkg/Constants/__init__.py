"""Project constants."""
