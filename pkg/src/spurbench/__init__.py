"""Benchmark synthesis and evaluation for spurious foreground/background
correlations in few-shot audio classification."""

__version__ = "0.1.0"
