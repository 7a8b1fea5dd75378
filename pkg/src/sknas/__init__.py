"""Latency-aware architecture search over shared depthwise superkernels."""

__version__ = "0.1.0"
