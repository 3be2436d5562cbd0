"""Numerical laboratory for dispersive estimates of Schroedinger flows with time-dependent potentials."""
