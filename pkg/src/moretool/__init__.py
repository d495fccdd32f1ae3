"""Mixture-of-residual-experts video classification toolkit."""

__version__ = "0.1.0"
