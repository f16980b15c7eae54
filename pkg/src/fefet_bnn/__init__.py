"""Device-aware Bayesian training for FeFET in-memory computing."""

__version__ = "0.1.0"
