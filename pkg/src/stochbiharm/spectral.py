"""Sine eigenbasis of the Dirichlet Laplacian on the unit cube.

Everything here is diagonal in the basis ``eps_alpha(z) = 2^{d/2} prod_i sin(alpha_i pi z_i)``
with ``-Laplace eps_alpha = lambda_alpha eps_alpha`` and ``lambda_alpha = pi^2 |alpha|^2``.
The biharmonic operator with Navier conditions has eigenvalues ``lambda_alpha**2``, so the
parabolic semigroup, the Backward Euler resolvent and the elliptic solution operators all
act coefficient-wise.

Multi-indices of a :class:`SpectralCutoff` are enumerated lexicographically
(last component fastest), which fixes the reduction order of every spectral sum.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from ._validation import check_dimension, check_points

#: ``exp(-x)`` underflows below double precision resolution once ``x`` exceeds this.
_EXP_NEGLIGIBLE = -math.log(1e-16)


def sinpi(z):
    """``sin(pi z)`` with exact zeros at integers and exact +-1 at half-integers."""
    z = np.asarray(z, dtype=float)
    r = z - 2.0 * np.round(0.5 * z)
    r = np.where(r > 0.5, 1.0 - r, r)
    r = np.where(r < -0.5, -1.0 - r, r)
    return np.sin(np.pi * r)


def multi_indices(d: int, n_max: int) -> np.ndarray:
    """All ``alpha`` with ``1 <= alpha_i <= n_max``, lexicographic, shape ``(n_max**d, d)``."""
    check_dimension(d)
    if n_max < 1:
        raise ValueError(f"n_max must be >= 1, got {n_max}")
    grids = np.meshgrid(*([np.arange(1, n_max + 1)] * d), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def eigenvalue(alpha: Sequence[int]) -> float:
    """Dirichlet Laplacian eigenvalue ``pi^2 sum(alpha_i^2)``."""
    alpha = _check_alpha(alpha)
    return float(np.pi**2 * np.sum(alpha.astype(float) ** 2))


def eval_eigenfunction(alpha: Sequence[int], x) -> np.ndarray | float:
    """Evaluate ``eps_alpha`` at one point or an array of points of shape ``(..., d)``."""
    alpha = _check_alpha(alpha)
    d = alpha.size
    pts = check_points(x, d)
    vals = 2.0 ** (d / 2) * np.prod(sinpi(alpha * pts), axis=-1)
    return float(vals) if np.ndim(vals) == 0 else vals


def cell_integrals_1d(n_max: int, J_star: int) -> np.ndarray:
    """``int_{x_{j-1}}^{x_j} sqrt(2) sin(a pi x) dx`` for ``a = 1..n_max``, ``j = 1..J_star``.

    Exact antiderivative; returns an array of shape ``(n_max, J_star)``.
    """
    if J_star < 1:
        raise ValueError(f"J_star must be >= 1, got {J_star}")
    a = np.arange(1, n_max + 1, dtype=float)[:, None]
    nodes = np.arange(J_star + 1, dtype=float) / J_star
    # cos(a pi x) with the argument reduced mod 2 before scaling by pi
    c = np.cos(np.pi * np.mod(a * nodes[None, :], 2.0))
    return np.sqrt(2.0) * (c[:, :-1] - c[:, 1:]) / (a * np.pi)


def cell_integral(alpha: Sequence[int], mu: Sequence[int], J_star: int) -> float:
    """``int_{D_mu} eps_alpha`` over the noise cell with 1-based index ``mu``."""
    alpha = _check_alpha(alpha)
    mu = np.atleast_1d(np.asarray(mu, dtype=int))
    if mu.shape != alpha.shape:
        raise ValueError("alpha and mu must have the same length")
    if np.any(mu < 1) or np.any(mu > J_star):
        raise ValueError(f"cell index {tuple(mu)} outside 1..{J_star}")
    table = cell_integrals_1d(int(alpha.max()), J_star)
    return float(np.prod(table[alpha - 1, mu - 1]))


@dataclass(frozen=True)
class SpectralCutoff:
    """Truncation ``{alpha : 1 <= alpha_i <= n_max}`` of the eigenbasis in dimension ``d``."""

    d: int
    n_max: int

    def __post_init__(self):
        check_dimension(self.d)
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise ValueError(f"n_max must be a positive integer, got {self.n_max}")

    @property
    def size(self) -> int:
        return self.n_max**self.d

    @cached_property
    def alphas(self) -> np.ndarray:
        return multi_indices(self.d, self.n_max)

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        """``lambda_alpha`` for every retained index (lexicographic)."""
        sq = np.arange(1, self.n_max + 1, dtype=float) ** 2
        total = sq
        for _ in range(self.d - 1):
            total = np.add.outer(total, sq)
        return np.pi**2 * np.ravel(total)

    def index_of(self, alpha: Sequence[int]) -> int:
        alpha = _check_alpha(alpha)
        if alpha.size != self.d or np.any(alpha > self.n_max):
            raise ValueError(f"alpha={tuple(alpha)} not in cutoff (d={self.d}, n_max={self.n_max})")
        return int(np.ravel_multi_index(tuple(alpha - 1), (self.n_max,) * self.d))

    def tail_majorant(self) -> float:
        """Upper bound of ``sum lambda_alpha^{-2}`` over all indices outside the cutoff.

        Some component exceeds ``n_max``; comparing the remaining sums with integrals gives
        ``d * c_{d-1} / (pi^4 (4-d)) * n_max^{d-4}`` where
        ``c_k = int_{R_+^k} (1+|z|^2)^{-2} dz`` (``c_0 = 1``, ``c_1 = c_2 = pi/4``).
        """
        c = {0: 1.0, 1: np.pi / 4, 2: np.pi / 4}[self.d - 1]
        return self.d * c / (np.pi**4 * (4 - self.d)) * float(self.n_max) ** (self.d - 4)

    def bessel_factors(self, J_star: int) -> np.ndarray:
        """``sum_mu (int_{D_mu} eps_alpha)^2 / dx^d`` per index; lies in ``[0, 1]``."""
        one_d = np.sum(cell_integrals_1d(self.n_max, J_star) ** 2, axis=1) * J_star
        return outer_product(one_d, self.d)


def sorted_index_blocks(d: int, n_max: int):
    """Yield ``(alphas, weights)`` covering the cutoff up to permutations of the components.

    Each block holds the nondecreasing indices with a fixed first component; ``weights`` counts
    the distinct permutations.  Sums of permutation-symmetric summands over the full box then
    cost roughly ``1/d!`` of the direct sum.
    """
    check_dimension(d)
    fact = {1: 1, 2: 2, 3: 6}
    for a in range(1, n_max + 1):
        if d == 1:
            alphas = np.array([[a]])
        elif d == 2:
            rest = np.arange(a, n_max + 1)
            alphas = np.column_stack([np.full(rest.size, a), rest])
        else:
            i, j = np.triu_indices(n_max - a + 1)
            alphas = np.column_stack([np.full(i.size, a), i + a, j + a])
        ties = np.ones(alphas.shape[0])
        if d >= 2:
            eq = alphas[:, 1:] == alphas[:, :-1]
            if d == 2:
                ties = np.where(eq[:, 0], 2.0, 1.0)
            else:
                both = eq[:, 0] & eq[:, 1]
                ties = np.where(both, 6.0, np.where(eq[:, 0] | eq[:, 1], 2.0, 1.0))
        yield alphas, fact[d] / ties


def outer_product(v: np.ndarray, d: int) -> np.ndarray:
    """Flattened ``d``-fold outer product of ``v`` with itself (lexicographic)."""
    out = np.asarray(v, dtype=float)
    for _ in range(d - 1):
        out = np.multiply.outer(out, v)
    return np.ravel(out)


def default_cutoff(d: int, t_min: float, n_cap: int | None = None) -> SpectralCutoff:
    """Smallest box cutoff whose first discarded mode satisfies ``exp(-lambda^2 t_min) < 1e-16``."""
    if t_min <= 0:
        raise ValueError("t_min must be positive")
    n = max(1, math.ceil((_EXP_NEGLIGIBLE / (np.pi**4 * t_min)) ** 0.25) - 1)
    if n_cap is not None:
        n = min(n, n_cap)
    return SpectralCutoff(d, n)


@dataclass(frozen=True)
class SpectralField:
    """Truncated expansion ``sum_alpha coeffs[alpha] eps_alpha``."""

    cutoff: SpectralCutoff
    coeffs: np.ndarray = field(repr=False)

    def __post_init__(self):
        c = np.array(self.coeffs, dtype=float).ravel()
        if c.size != self.cutoff.size:
            raise ValueError(f"expected {self.cutoff.size} coefficients, got {c.size}")
        if not np.all(np.isfinite(c)):
            raise ValueError("coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, cutoff: SpectralCutoff) -> "SpectralField":
        return cls(cutoff, np.zeros(cutoff.size))

    @classmethod
    def unit(cls, cutoff: SpectralCutoff, alpha: Sequence[int], value: float = 1.0) -> "SpectralField":
        c = np.zeros(cutoff.size)
        c[cutoff.index_of(alpha)] = value
        return cls(cutoff, c)

    @property
    def d(self) -> int:
        return self.cutoff.d

    def _like(self, coeffs) -> "SpectralField":
        return SpectralField(self.cutoff, coeffs)

    def _check_same(self, other: "SpectralField"):
        if other.cutoff != self.cutoff:
            raise ValueError("fields live on different cutoffs")

    def __add__(self, other: "SpectralField") -> "SpectralField":
        self._check_same(other)
        return self._like(self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        self._check_same(other)
        return self._like(self.coeffs - other.coeffs)

    def __mul__(self, scalar: float) -> "SpectralField":
        return self._like(self.coeffs * float(scalar))

    __rmul__ = __mul__

    def inner(self, other: "SpectralField") -> float:
        """L2 inner product (orthonormal basis)."""
        self._check_same(other)
        return float(np.sum(self.coeffs * other.coeffs))

    def evaluate(self, x) -> np.ndarray:
        """Point values at ``x`` of shape ``(..., d)``."""
        pts = check_points(x, self.d)
        flat = pts.reshape(-1, self.d)
        n = self.cutoff.n_max
        a = np.arange(1, n + 1, dtype=float)
        tables = [np.sqrt(2.0) * sinpi(np.multiply.outer(flat[:, i], a)) for i in range(self.d)]
        c = self.coeffs.reshape((n,) * self.d)
        if self.d == 1:
            vals = tables[0] @ c
        elif self.d == 2:
            vals = np.einsum("pa,ab,pb->p", tables[0], c, tables[1], optimize=True)
        else:
            vals = np.einsum("pa,abc,pb,pc->p", tables[0], c, tables[1], tables[2], optimize=True)
        return vals.reshape(pts.shape[:-1])


def semigroup_apply(f: SpectralField, t: float) -> SpectralField:
    """``S(t) f``: multiply each coefficient by ``exp(-lambda_alpha^2 t)``."""
    if t < 0:
        raise ValueError(f"semigroup time must be >= 0, got {t}")
    if t == 0:
        return f
    return f._like(f.coeffs * np.exp(-f.cutoff.eigenvalues**2 * t))


def resolvent_apply(f: SpectralField, dtau: float, power: int = 1) -> SpectralField:
    """``(I + dtau Delta^2)^{-power} f``."""
    if dtau <= 0:
        raise ValueError(f"dtau must be positive, got {dtau}")
    return f._like(f.coeffs * (1.0 + dtau * f.cutoff.eigenvalues**2) ** (-int(power)))


def elliptic_inverse(f: SpectralField) -> SpectralField:
    """``T_E f``: the solution ``v`` of ``Delta v = f`` with ``v = 0`` on the boundary."""
    return f._like(-f.coeffs / f.cutoff.eigenvalues)


def biharmonic_inverse(f: SpectralField) -> SpectralField:
    """``T_B f``: the solution of ``Delta^2 v = f`` with ``v = Delta v = 0`` on the boundary.

    Computed as ``T_E T_E f`` so the factorization holds bit for bit.
    """
    return elliptic_inverse(elliptic_inverse(f))


def hdot_norm(f: SpectralField, s: float) -> float:
    """``(sum lambda_alpha^s c_alpha^2)^{1/2}`` over the retained indices.

    For ``s < 0`` this is a lower bound of the norm of the untruncated function.
    """
    return float(np.sqrt(np.sum(f.cutoff.eigenvalues**s * f.coeffs**2)))


def green_kernel(t: float, x, y, cutoff: SpectralCutoff | None = None, d: int | None = None) -> float:
    """Truncated space-time Green kernel ``sum exp(-lambda^2 t) eps(x) eps(y)``."""
    if t <= 0:
        raise ValueError("the Green kernel series needs t > 0")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    if cutoff is None:
        cutoff = default_cutoff(d or x.size, t)
    check_points(x, cutoff.d)
    check_points(y, cutoff.d)
    a = np.arange(1, cutoff.n_max + 1, dtype=float)
    # product over dimensions of sin(a pi x_i) sin(a pi y_i) is symmetric in (x, y) term by term
    per_dim = [2.0 * sinpi(a * x[i]) * sinpi(a * y[i]) for i in range(cutoff.d)]
    prod = per_dim[0]
    for v in per_dim[1:]:
        prod = np.multiply.outer(prod, v)
    return float(np.sum(np.exp(-cutoff.eigenvalues**2 * t) * np.ravel(prod)))


def p_poly(d: int, s):
    """``p_d(s) = 1 + s + ... + s^d``."""
    return 1.0 + sum(np.asarray(s, dtype=float) ** i for i in range(1, d + 1))


def _box_chunks(d: int, n_max: int, max_chunk: int = 2_000_000):
    """Yield ``|alpha|^2`` for the box in slabs over the leading index."""
    sq = np.arange(1, n_max + 1, dtype=float) ** 2
    rest = np.zeros(1)
    for _ in range(d - 1):
        rest = np.add.outer(rest, sq).ravel()
    step = max(1, max_chunk // max(rest.size, 1))
    for start in range(0, n_max, step):
        yield np.add.outer(sq[start:start + step], rest).ravel()


def series_lemma_A1(d: int, c_star: float, eps: float, n_max: int, tail: bool = False) -> float:
    """Partial sum of ``|alpha|^{-(d + c_star eps)}`` over the box ``alpha_i <= n_max``.

    With ``tail=True`` the integral ``int_{|x| > n_max, x > 0} |x|^{-(d + c_star eps)} dx``
    is added; it dominates the sum over the box complement.
    """
    check_dimension(d)
    if eps <= 0 or c_star <= 0:
        raise ValueError("eps and c_star must be positive")
    expo = -(d + c_star * eps) / 2.0
    total = math.fsum(float(np.sum(r2**expo)) for r2 in _box_chunks(d, n_max))
    if tail:
        orthant_area = {1: 1.0, 2: np.pi / 2, 3: np.pi / 2}[d]
        total += orthant_area * n_max ** (-c_star * eps) / (c_star * eps)
    return total


def series_lemma_A2(d: int, delta: float, n_max: int, tail: bool = False) -> float:
    """Partial sum of ``(1 - exp(-lambda^2 delta)) / lambda^2`` over the box.

    With ``tail=True`` the majorant of ``sum lambda^{-2}`` outside the box is added, so the
    result bounds the full series from above.
    """
    check_dimension(d)
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    parts = []
    for r2 in _box_chunks(d, n_max):
        lam2 = (np.pi**2 * r2) ** 2
        parts.append(float(np.sum(-np.expm1(-lam2 * delta) / lam2)))
    if tail:
        parts.append(SpectralCutoff(d, n_max).tail_majorant())
    return math.fsum(parts)


def _check_alpha(alpha) -> np.ndarray:
    a = np.atleast_1d(np.asarray(alpha))
    if a.ndim != 1 or not np.issubdtype(a.dtype, np.integer):
        if np.all(np.mod(a, 1) == 0):
            a = a.astype(int)
        else:
            raise ValueError(f"multi-index must be integer, got {alpha!r}")
    check_dimension(a.size)
    if np.any(a < 1):
        raise ValueError(f"multi-index components must be >= 1, got {tuple(a)}")
    return a
