"""Scale estimation and screentone-aware restoration of degraded manga pages."""

__version__ = "0.1.0"
