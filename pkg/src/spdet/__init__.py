"""Self-prompted multi-label lesion detection, end to end on synthetic data."""

__version__ = "0.1.0"
