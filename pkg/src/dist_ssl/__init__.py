"""Dual invariance self-training on clip classification tasks."""

__version__ = "0.1.0"
