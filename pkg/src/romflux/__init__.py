"""Finite-volume POD-Galerkin reduced-order modelling with a learned eddy-viscosity closure."""

__version__ = "0.1.0"
