"""Truncation-free ad matching: near-line top-n caches, baseline matchers
and a deterministic simulation harness to compare them."""

__version__ = "0.1.0"

__all__ = ["__version__"]
