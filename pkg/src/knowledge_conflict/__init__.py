"""Toy two-layer transformer model of knowledge conflict, with head interventions."""

__version__ = "0.1.0"
