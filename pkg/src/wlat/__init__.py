"""Attention-pooling models for weakly labelled multi-label tagging."""

__version__ = "0.1.0"
