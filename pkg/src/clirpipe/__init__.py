"""Cross-lingual late-interaction retrieval experiment engine."""

__version__ = "0.1.0"
