"""Sentiment- and semantics-driven facial expression synthesis for sign language."""

__version__ = "0.1.0"
