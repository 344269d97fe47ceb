"""Clamped uniform B-splines of maximal smoothness on [0, 1]."""
from __future__ import annotations

from functools import cached_property

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.interpolate import BSpline


def gauss_rule(breaks: np.ndarray, q: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite ``q``-point Gauss-Legendre rule on the intervals between ``breaks``."""
    z, w = leggauss(q)
    a = breaks[:-1, None]
    h = np.diff(breaks)[:, None]
    return (a + 0.5 * h * (z + 1.0)).ravel(), (0.5 * h * w).ravel()


def subdivided_breaks(breaks: np.ndarray, max_width: float) -> np.ndarray:
    """Split every interval of ``breaks`` into equal pieces no wider than ``max_width``."""
    pieces = [np.array([breaks[0]])]
    for a, b in zip(breaks[:-1], breaks[1:]):
        s = max(1, int(np.ceil((b - a) / max_width - 1e-12)))
        pieces.append(a + (b - a) * np.arange(1, s + 1) / s)
    out = np.concatenate(pieces)
    out[-1] = breaks[-1]
    return out


class BSplineBasis1D:
    """Degree-``r`` splines, ``C^{r-1}`` on ``K`` uniform elements, zero at both endpoints.

    The clamped basis has ``K + r`` functions; only the first and last are nonzero at the
    endpoints, so dropping them leaves ``K + r - 2`` functions vanishing on the boundary.
    """

    def __init__(self, degree: int, n_elements: int):
        if degree not in (2, 3, 4):
            raise ValueError(f"degree must be 2, 3 or 4, got {degree}")
        if n_elements < 1:
            raise ValueError("need at least one element")
        self.degree = degree
        self.n_elements = n_elements
        self.breaks = np.linspace(0.0, 1.0, n_elements + 1)
        self.knots = np.concatenate([np.zeros(degree), self.breaks, np.ones(degree)])
        self.n_full = n_elements + degree
        self.ndof = self.n_full - 2

    @cached_property
    def _splines(self):
        full = BSpline(self.knots, np.eye(self.n_full), self.degree)
        return [full] + [full.derivative(nu) for nu in (1, 2)]

    def evaluate(self, x, nu: int = 0, full: bool = False) -> np.ndarray:
        """Basis values (or ``nu``-th derivatives) at ``x``, shape ``(len(x), ndof)``."""
        x = np.clip(np.atleast_1d(np.asarray(x, dtype=float)), 0.0, 1.0)
        vals = self._splines[nu](x)
        return vals if full else vals[:, 1:-1]

    @cached_property
    def element_rule(self) -> tuple[np.ndarray, np.ndarray]:
        """Gauss rule exact for polynomials of degree ``2r + 1`` on each element."""
        return gauss_rule(self.breaks, self.degree + 1)

    def _gram(self, nu_a: int, nu_b: int) -> np.ndarray:
        x, w = self.element_rule
        A = self.evaluate(x, nu_a)
        B = self.evaluate(x, nu_b)
        G = (A * w[:, None]).T @ B
        return 0.5 * (G + G.T)

    @cached_property
    def mass(self) -> np.ndarray:
        return self._gram(0, 0)

    @cached_property
    def stiffness1(self) -> np.ndarray:
        return self._gram(1, 1)

    @cached_property
    def stiffness2(self) -> np.ndarray:
        return self._gram(2, 2)

    @cached_property
    def cross(self) -> np.ndarray:
        """``(b_i'', b_j)``; symmetric because every retained function vanishes at the ends."""
        return self._gram(2, 0)

    def cell_integrals(self, J: int) -> np.ndarray:
        """``int_{(j-1)/J}^{j/J} b_i`` exactly, shape ``(ndof, J)``."""
        cells = np.linspace(0.0, 1.0, J + 1)
        breaks = np.union1d(self.breaks, cells)
        x, w = gauss_rule(breaks, self.degree + 1)
        cell = np.minimum(np.floor(x * J).astype(int), J - 1)
        vals = self.evaluate(x) * w[:, None]
        out = np.zeros((self.ndof, J))
        np.add.at(out.T, cell, vals)
        return out

    def sine_moments(self, n_max: int, nu: int = 0) -> np.ndarray:
        """``int b_i^{(nu)}(x) sqrt(2) sin(a pi x) dx`` for ``a = 1..n_max``, shape ``(ndof, n_max)``.

        Elements are subdivided so each piece spans at most a third of a sine half-period;
        with ``r + 10`` Gauss points per piece the rule is converged to round-off.
        """
        breaks = subdivided_breaks(self.breaks, 1.0 / (3.0 * n_max))
        x, w = gauss_rule(breaks, self.degree + 10)
        S = np.sqrt(2.0) * np.sin(np.pi * np.outer(x, np.arange(1, n_max + 1)))
        return (self.evaluate(x, nu) * w[:, None]).T @ S
