"""Numerics for SDEs with discontinuous, locally integrable drift.

Parabolic Dirichlet solves, the Zvonkin change of variables, localized and
globalized Euler-Maruyama simulation, and Monte Carlo checks of Krylov,
stability and non-explosion estimates.
"""

__version__ = "0.1.0"
