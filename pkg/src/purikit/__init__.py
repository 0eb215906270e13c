"""Entanglement purification statistics and variational protocol optimisation."""
__version__ = "0.1.0"
