"""Few-shot graph classification with hierarchical task graphs."""

__version__ = "0.1.0"
