"""Weakly supervised natural-language-explanation training on a synthetic micro-domain."""

__version__ = "0.1.0"
