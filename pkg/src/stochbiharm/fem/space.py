"""Tensor-product C1 spline space and its Galerkin operators.

The biharmonic form expands as ``(Lap u, Lap v) = sum_{i,j} (d_ii u, d_jj v)``, so with the
1D matrices ``M0 = (b, b)``, ``M2 = (b'', b'')`` and ``C = (b'', b)`` the stiffness matrix is a
sum of Kronecker products: ``M2 (x) M0 + M0 (x) M2 + 2 C (x) C`` in two dimensions.
Degrees of freedom are ordered lexicographically, first coordinate slowest.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from functools import cached_property, reduce
from typing import Callable

import numpy as np
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .._validation import check_dimension
from ..noise import contract_cells
from ..spectral import SpectralField
from .basis import BSplineBasis1D, gauss_rule, subdivided_breaks

log = logging.getLogger(__name__)

DOF_LIMIT = 200_000
EIGEN_DOF_LIMIT = 3_000
ITERATIVE_RTOL = 1e-11


class SolverError(RuntimeError):
    """A linear solve failed or did not reach its tolerance."""


class DofLimitError(ValueError):
    """A dense or direct operation was refused because the space is too large."""


def _kron_all(mats) -> sp.csr_matrix:
    return reduce(lambda a, b: sp.kron(a, b, format="csr"), mats).tocsr()


@dataclass(eq=False)
class FemSpace:
    """``M_h``: degree-``degree`` C1 splines on ``n_elements**d`` uniform cells, zero on the boundary."""

    d: int
    degree: int
    n_elements: int
    dof_limit: int = DOF_LIMIT
    _factors: dict = field(default_factory=dict, init=False, repr=False)

    def __post_init__(self):
        check_dimension(self.d)
        self.basis = BSplineBasis1D(self.degree, self.n_elements)
        if self.ndof > self.dof_limit:
            raise DofLimitError(f"{self.ndof} dofs exceed the limit {self.dof_limit}")

    @property
    def h(self) -> float:
        return 1.0 / self.n_elements

    @property
    def ndof_1d(self) -> int:
        return self.basis.ndof

    @property
    def ndof(self) -> int:
        return self.basis.ndof**self.d

    # -- assembly ---------------------------------------------------------------------
    def _slots(self, assignment: dict[int, np.ndarray]) -> sp.csr_matrix:
        M0 = sp.csr_matrix(self.basis.mass)
        return _kron_all([sp.csr_matrix(assignment[i]) if i in assignment else M0 for i in range(self.d)])

    @cached_property
    def mass(self) -> sp.csr_matrix:
        return self._slots({})

    @cached_property
    def stiffness(self) -> sp.csr_matrix:
        """Biharmonic stiffness ``(Lap phi_i, Lap phi_j)``."""
        b = self.basis
        K = reduce(lambda a, c: a + c, [self._slots({i: b.stiffness2}) for i in range(self.d)])
        for i in range(self.d):
            for j in range(i + 1, self.d):
                K = K + 2.0 * self._slots({i: b.cross, j: b.cross})
        K = K.tocsr()
        K.eliminate_zeros()
        return K

    @cached_property
    def laplace_stiffness(self) -> sp.csr_matrix:
        """``(grad phi_i, grad phi_j)``."""
        b = self.basis
        return reduce(lambda a, c: a + c, [self._slots({i: b.stiffness1}) for i in range(self.d)]).tocsr()

    # -- solves -----------------------------------------------------------------------
    def _factor(self, key, matrix_fn):
        if key not in self._factors:
            A = matrix_fn().tocsc()
            try:
                self._factors[key] = ("lu", spla.splu(A))
            except (MemoryError, RuntimeError) as exc:  # pragma: no cover - depends on size
                log.warning("direct factorization failed (%s); falling back to CG", exc)
                self._factors[key] = ("cg", A)
        return self._factors[key]

    def _solve(self, key, matrix_fn, rhs: np.ndarray) -> np.ndarray:
        kind, obj = self._factor(key, matrix_fn)
        if kind == "lu":
            x = obj.solve(np.asarray(rhs, dtype=float))
            if not np.all(np.isfinite(x)):
                raise SolverError(f"direct solve for {key} produced non-finite values")
            return x
        cols = rhs.reshape(rhs.shape[0], -1)
        out = np.empty_like(cols)
        for j in range(cols.shape[1]):
            out[:, j], info = spla.cg(obj, cols[:, j], rtol=ITERATIVE_RTOL, atol=0.0, maxiter=20 * obj.shape[0])
            if info != 0:
                res = np.linalg.norm(obj @ out[:, j] - cols[:, j]) / max(np.linalg.norm(cols[:, j]), 1e-300)
                raise SolverError(f"CG did not converge for {key}: relative residual {res:.3e}")
        return out.reshape(rhs.shape)

    def solve_mass(self, rhs):
        return self._solve(("mass",), lambda: self.mass, rhs)

    def solve_stiffness(self, rhs):
        return self._solve(("stiffness",), lambda: self.stiffness, rhs)

    def solve_step(self, k: float, rhs):
        """Solve ``(M + k K) x = rhs``; the factorization is cached per step size."""
        return self._solve(("step", float(k)), lambda: self.mass + k * self.stiffness, rhs)

    # -- loads ------------------------------------------------------------------------
    def load_spectral(self, f: SpectralField) -> np.ndarray:
        """``(f, phi_i)`` for a truncated sine expansion."""
        if f.d != self.d:
            raise ValueError("dimension mismatch")
        E = self.basis.sine_moments(f.cutoff.n_max)
        return contract_cells(f.coeffs[None, :], E, self.d)[0]

    def load_function(self, f: Callable[[np.ndarray], np.ndarray], extra_points: int = 4) -> np.ndarray:
        """``(f, phi_i)`` for a vectorized callable ``f(x)`` with ``x`` of shape ``(..., d)``."""
        x1, w1 = gauss_rule(self.basis.breaks, self.degree + 1 + extra_points)
        pts = np.stack(np.meshgrid(*([x1] * self.d), indexing="ij"), axis=-1)
        wts = reduce(np.multiply.outer, [w1] * self.d)
        vals = np.asarray(f(pts), dtype=float) * wts
        B = self.basis.evaluate(x1)
        return contract_cells(vals.reshape(1, -1), B.T, self.d)[0]

    def load(self, f) -> np.ndarray:
        return self.load_spectral(f) if isinstance(f, SpectralField) else self.load_function(f)

    def cell_loads(self, cell_values: np.ndarray, J: int) -> np.ndarray:
        """``(sum_mu v_mu 1_{D_mu}, phi_i)`` for rows of cell values, shape ``(batch, ndof)``."""
        G = self.basis.cell_integrals(J)
        return contract_cells(np.atleast_2d(cell_values), G, self.d)

    # -- evaluation ---------------------------------------------------------------------
    def quadrature_grid(self, n_max: int = 0, extra_points: int = 8):
        """1D points/weights resolving the splines and sines up to ``n_max`` on each piece."""
        breaks = self.basis.breaks
        if n_max > 0:
            breaks = subdivided_breaks(breaks, 1.0 / (1.0 * n_max))
        return gauss_rule(breaks, self.degree + extra_points)

    def grid_values(self, coeffs: np.ndarray, x1: np.ndarray, which: str = "value") -> np.ndarray:
        """Tensor-grid values of ``u`` or ``Lap u`` at ``x1 x ... x x1``; flat lexicographic."""
        coeffs = np.atleast_2d(coeffs)
        if which == "value":
            B = self.basis.evaluate(x1)
            return contract_cells(coeffs, B, self.d)
        if which != "laplacian":
            raise ValueError(f"unknown quantity {which!r}")
        B0 = self.basis.evaluate(x1)
        B2 = self.basis.evaluate(x1, 2)
        total = 0.0
        for i in range(self.d):
            total = total + _contract_mixed(coeffs, [B2 if j == i else B0 for j in range(self.d)])
        return total


def _contract_mixed(coeffs: np.ndarray, mats) -> np.ndarray:
    d = len(mats)
    n = mats[0].shape[1]
    v = coeffs.reshape((coeffs.shape[0],) + (n,) * d)
    for axis, B in enumerate(mats, start=1):
        v = np.moveaxis(np.tensordot(v, B, axes=([axis], [1])), -1, axis)
    return v.reshape(coeffs.shape[0], -1)


@dataclass
class FemFunction:
    space: FemSpace
    coeffs: np.ndarray

    def __post_init__(self):
        self.coeffs = np.asarray(self.coeffs, dtype=float)
        if self.coeffs.shape != (self.space.ndof,):
            raise ValueError(f"expected {self.space.ndof} coefficients, got shape {self.coeffs.shape}")

    def evaluate(self, x) -> np.ndarray:
        pts = np.asarray(x, dtype=float)
        flat = pts.reshape(-1, self.space.d)
        Bs = [self.space.basis.evaluate(flat[:, i]) for i in range(self.space.d)]
        n = self.space.ndof_1d
        c = self.coeffs.reshape((n,) * self.space.d)
        if self.space.d == 1:
            vals = Bs[0] @ c
        elif self.space.d == 2:
            vals = np.einsum("pi,ij,pj->p", Bs[0], c, Bs[1], optimize=True)
        else:
            vals = np.einsum("pi,ijk,pj,pk->p", Bs[0], c, Bs[1], Bs[2], optimize=True)
        return vals.reshape(pts.shape[:-1])

    def l2_norm(self) -> float:
        return float(np.sqrt(self.coeffs @ (self.space.mass @ self.coeffs)))

    def to_grid_csv(self, path, n_points: int = 33) -> None:
        """Sample on a regular grid of ``n_points`` per dimension: columns ``x1..xd, value``."""
        g = np.linspace(0.0, 1.0, n_points)
        pts = np.stack(np.meshgrid(*([g] * self.space.d), indexing="ij"), axis=-1).reshape(-1, self.space.d)
        vals = self.evaluate(pts)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"x{i + 1}" for i in range(self.space.d)] + ["value"])
            for p, v in zip(pts, vals):
                w.writerow([*(format(c, ".17g") for c in p), format(v, ".17g")])


def assemble(space: FemSpace) -> dict[str, sp.csr_matrix]:
    return {"M": space.mass, "K_B": space.stiffness}


def export_matrix(A: sp.spmatrix, path) -> None:
    """Coordinate text format: one ``row col value`` line per stored entry (0-based)."""
    coo = sp.coo_matrix(A)
    order = np.lexsort((coo.col, coo.row))
    with open(path, "w") as fh:
        fh.write(f"% {A.shape[0]} {A.shape[1]} {coo.nnz}\n")
        for i in order:
            fh.write(f"{coo.row[i]} {coo.col[i]} {coo.data[i]:.17g}\n")


def l2_project(f, space: FemSpace) -> FemFunction:
    """``P_h f``: solve ``M c = (f, phi)``."""
    return FemFunction(space, space.solve_mass(space.load(f)))


def solve_biharmonic(f, space: FemSpace) -> FemFunction:
    """``T_{B,h} f``: solve ``K_B c = (f, phi)``."""
    return FemFunction(space, space.solve_stiffness(space.load(f)))


@dataclass(frozen=True)
class DiscreteEigenpairs:
    values: np.ndarray
    vectors: np.ndarray  # M-orthonormal columns


def discrete_eigenpairs(space: FemSpace, max_dofs: int = EIGEN_DOF_LIMIT) -> DiscreteEigenpairs:
    """Solve ``K_B x = lambda M x`` densely."""
    if space.ndof > max_dofs:
        raise DofLimitError(
            f"{space.ndof} dofs exceed the dense eigensolver limit {max_dofs}; "
            "use Backward Euler time stepping instead")
    vals, vecs = scipy.linalg.eigh(space.stiffness.toarray(), space.mass.toarray())
    return DiscreteEigenpairs(vals, vecs)


def fem_vs_spectral_error(fh: FemFunction | np.ndarray, f: SpectralField, space: FemSpace | None = None,
                          method: str = "quadrature", which: str = "value",
                          max_points_1d: int = 8192) -> np.ndarray | float:
    """``||fh - f||_{L2}`` (``which="laplacian"``: ``||Lap fh - Lap f||``).

    ``fh`` may be a batch of coefficient vectors (rows) when ``space`` is given; the result
    then has one entry per row.  ``method="quadrature"`` integrates the squared difference on
    a tensor Gauss grid refined to resolve the sine modes; ``method="gram"`` expands the
    square into ``c'Mc - 2 c'(E x E) a + |a|^2`` which is cheap but loses accuracy once the
    error drops far below the norms.
    """
    if isinstance(fh, FemFunction):
        space, coeffs, single = fh.space, fh.coeffs[None, :], True
    else:
        coeffs = np.atleast_2d(fh)
        single = np.ndim(fh) == 1
    if space is None:
        raise ValueError("space is required for raw coefficient arrays")
    if f.d != space.d:
        raise ValueError("dimension mismatch")
    n = f.cutoff.n_max
    a = f.coeffs if which == "value" else -f.cutoff.eigenvalues * f.coeffs
    if method == "quadrature":
        x1, w1 = space.quadrature_grid(n)
        if x1.size > max_points_1d:
            raise DofLimitError(f"cutoff {n} needs {x1.size} quadrature points per dimension")
        uh = space.grid_values(coeffs, x1, which)
        S = np.sqrt(2.0) * np.sin(np.pi * np.outer(x1, np.arange(1, n + 1)))
        ref = contract_cells(a[None, :], S, space.d)[0]
        wts = reduce(np.multiply.outer, [w1] * space.d).ravel()
        err = np.sqrt(np.maximum(((uh - ref) ** 2) @ wts, 0.0))
    elif method == "gram":
        if which != "value":
            raise ValueError("the Gram expansion is implemented for values only")
        E = space.basis.sine_moments(n)
        proj = contract_cells(a[None, :], E, space.d)[0]
        Mc = (space.mass @ coeffs.T).T
        sq = np.sum(coeffs * Mc, axis=1) - 2.0 * coeffs @ proj + float(a @ a)
        err = np.sqrt(np.maximum(sq, 0.0))
    else:
        raise ValueError(f"unknown method {method!r}")
    return float(err[0]) if single else err
