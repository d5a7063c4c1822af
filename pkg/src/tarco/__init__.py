"""Tree-aggregated sparse log-contrast regression under measurement error."""

__version__ = "0.1.0"
