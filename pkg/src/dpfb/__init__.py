"""Differentially private training and fairness auditing at desk scale."""

__version__ = "0.1.0"
