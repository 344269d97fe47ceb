"""Discretizations of a fourth-order stochastic parabolic equation on the unit square/cube.

The equation ``u_t + Lap^2 u = W_dot`` with ``u = Lap u = 0`` on the boundary is driven by
space-time white noise, replaced here by its piecewise-constant regularization.  The
package provides the exact spectral (sine series) solution of the regularized problem,
Backward Euler in time, C1 spline Galerkin in space, and exact/Monte Carlo error studies.
"""
__version__ = "0.1.0"
