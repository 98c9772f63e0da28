"""Context-built Bayesian networks for explained options wheel decisions."""

__version__ = "0.1.0"
