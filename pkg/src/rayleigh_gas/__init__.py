"""Desk-scale laboratory for a hard-sphere Rayleigh gas mixture and its linear Boltzmann limit."""

__version__ = "0.1.0"
