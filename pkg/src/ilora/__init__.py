"""Intrinsic-image recovery from toy generative models via low-rank adapters."""

__version__ = "0.1.0"
