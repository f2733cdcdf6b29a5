"""Text-to-pedestrian-image retrieval with progressive feature mining and batch knowledge aggregation."""

__version__ = "0.1.0"
