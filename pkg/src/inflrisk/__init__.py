"""Inflation-at-Risk from factor-augmented quantile regressions on multi-level factors."""

__version__ = "0.1.0"
