"""Elliptical slice sampling, comparison kernels and ergodicity diagnostics."""

__version__ = "0.1.0"
