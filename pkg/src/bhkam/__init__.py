"""Perturbative diagonalization and energy-current tools for the Bose-Hubbard chain."""

__version__ = "0.1.0"
