"""Bayesian flexible additive joint models of a longitudinal marker and a time-to-event outcome."""
__version__ = '2026.10.19'
