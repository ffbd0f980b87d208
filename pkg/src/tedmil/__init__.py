"""Weakly supervised video anomaly detection with a causal temporal encoder-decoder."""

__version__ = "0.1.0"
