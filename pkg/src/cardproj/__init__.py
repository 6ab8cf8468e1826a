"""Cardinality-constrained multi-label prediction with differentiable projections."""

__version__ = "0.1.0"
