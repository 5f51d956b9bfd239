"""Heterogeneous-agent mean field models in which households forecast prices and learn from them."""

__version__ = "0.1.0"
