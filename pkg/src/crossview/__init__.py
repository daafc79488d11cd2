"""Cross-view controls, attention and evaluation toolkit for satellite-to-street synthesis."""

__version__ = "0.1.0"
