"""Command-line experiment driver for the sparse factor toolkit."""

__version__ = "0.1.0"
