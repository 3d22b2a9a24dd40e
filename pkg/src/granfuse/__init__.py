"""Multi-granularity fusion network for aspect-based sentiment analysis."""

__version__ = "0.1.0"
