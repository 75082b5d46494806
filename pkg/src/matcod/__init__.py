"""Bayesian estimation of maternal cause-of-death distributions."""

__version__ = "0.1.0"
