"""Multi-view geometric consistency toolkit."""

__version__ = "0.1.0"
