"""Modelling toolkit for ion transport between two surface-trap modules."""
__version__ = "0.1.0"
