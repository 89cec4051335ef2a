"""Distance-aware hierarchical retrieval: scale partitions, DyCL losses, metrics, re-ranking."""

__version__ = "0.1.0"
