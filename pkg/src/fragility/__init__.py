"""Numerical-fragility diagnostics for a toy Transformer under emulated low precision."""

__version__ = "0.1.0"
