"""Regression Monte Carlo and finite-difference solvers for semilinear PDEs
and obstacle problems with monotone drivers, through their (reflected) BSDE
representation."""

__version__ = "0.1.0"
