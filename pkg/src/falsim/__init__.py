"""Federated adversarial learning simulator with stability diagnostics."""

__version__ = "0.1.0"
