"""Politex (regularised policy iteration) for average-reward MDPs with linear features."""

__version__ = "0.1.0"
