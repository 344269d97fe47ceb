import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial.legendre import leggauss

from stochbiharm.fem import (
    BSplineBasis1D,
    DofLimitError,
    FemFunction,
    FemSpace,
    assemble,
    be_steps,
    deterministic_fd_path,
    discrete_eigenpairs,
    export_matrix,
    fem_vs_spectral_error,
    fully_discrete_path,
    l2_project,
    semidiscrete_homogeneous,
    solve_biharmonic,
)
from stochbiharm.fem.basis import gauss_rule
from stochbiharm.noise import NoiseGrid, NoiseRealization, SeedSpec, sample
from stochbiharm.oracle import TimePartition, deterministic_be
from stochbiharm.rates import ConvergenceStudy, fit_rate
from stochbiharm.spectral import SpectralCutoff, SpectralField, eigenvalue


def unit(alpha, n_max=None):
    return SpectralField.unit(SpectralCutoff(len(alpha), n_max or max(alpha)), alpha)


def random_spectral(d, n_max, seed):
    c = SpectralCutoff(d, n_max)
    return SpectralField(c, np.random.default_rng(seed).standard_normal(c.size) / c.eigenvalues)


def slopes(hs, errs):
    return np.diff(np.log(errs)) / np.diff(np.log(hs))


class TestBasis:
    @pytest.mark.parametrize("degree", [2, 3, 4])
    def test_partition_of_unity_and_boundary(self, degree):
        b = BSplineBasis1D(degree, 5)
        x = np.linspace(0, 1, 101)
        assert np.allclose(b.evaluate(x, full=True).sum(axis=1), 1.0, atol=1e-14)
        ends = b.evaluate(np.array([0.0, 1.0]))
        assert np.max(np.abs(ends)) <= 1e-12
        assert b.ndof == 5 + degree - 2

    def test_rejects_bad_degree(self):
        with pytest.raises(ValueError):
            BSplineBasis1D(5, 4)

    def test_cubic_integrals(self):
        # interior cubic B-splines integrate to h; full-basis mass row sums give the same integrals
        b = BSplineBasis1D(3, 8)
        x, w = gauss_rule(b.breaks, 6)
        full = b.evaluate(x, full=True)
        integrals = w @ full
        knots = b.knots
        expected = (knots[4:] - knots[:-4]) / 4
        assert np.allclose(integrals, expected, rtol=1e-14)
        assert np.allclose(integrals[3:-3], 1 / 8, rtol=1e-14)
        full_mass = (full * w[:, None]).T @ full
        assert np.allclose(full_mass.sum(axis=1), expected, rtol=1e-13)

    def test_cell_integrals_exact(self):
        b = BSplineBasis1D(3, 4)
        G = b.cell_integrals(6)
        x, w = gauss_rule(np.linspace(0, 1, 13), 8)
        ref = np.stack([(w * ((x >= j / 6) & (x < (j + 1) / 6))) @ b.evaluate(x) for j in range(6)], axis=1)
        assert np.allclose(G, ref, rtol=1e-13, atol=1e-16)


class TestAssembly:
    space = FemSpace(2, 3, 4)

    def test_symmetry_bit_exact(self):
        mats = assemble(self.space)
        for A in mats.values():
            assert (abs(A - A.T)).max() == 0

    def test_definiteness(self):
        K = self.space.stiffness.toarray()
        M = self.space.mass.toarray()
        assert np.linalg.eigvalsh(K).min() > 0
        assert np.linalg.eigvalsh(M).min() > 0

    def test_dense_oracle(self):
        # assemble M and K_B by brute-force tensor quadrature
        b = self.space.basis
        x, w = gauss_rule(b.breaks, 6)
        B0, B2 = b.evaluate(x), b.evaluate(x, 2)
        Phi = np.einsum("pi,qj->pqij", B0, B0).reshape(x.size**2, -1)
        Lap = (np.einsum("pi,qj->pqij", B2, B0) + np.einsum("pi,qj->pqij", B0, B2)).reshape(x.size**2, -1)
        W = np.outer(w, w).ravel()
        assert np.allclose(self.space.mass.toarray(), (Phi * W[:, None]).T @ Phi, rtol=0, atol=1e-15)
        assert np.allclose(self.space.stiffness.toarray(), (Lap * W[:, None]).T @ Lap, rtol=1e-12, atol=1e-9)

    def test_dof_guard(self):
        with pytest.raises(DofLimitError):
            FemSpace(3, 3, 40, dof_limit=10_000)

    def test_export(self, tmp_path):
        export_matrix(self.space.mass, tmp_path / "m.txt")
        lines = (tmp_path / "m.txt").read_text().splitlines()
        n, m, nnz = map(int, lines[0][1:].split())
        assert n == m == self.space.ndof and nnz == len(lines) - 1
        i, j, v = lines[1].split()
        assert (int(i), int(j)) == (0, 0) and float(v) == self.space.mass[0, 0]


class TestProjection:
    space = FemSpace(2, 3, 4)

    def test_identity_on_space(self):
        c = np.random.default_rng(0).standard_normal(self.space.ndof)
        f = FemFunction(self.space, c)
        p = l2_project(f.evaluate, self.space)
        assert np.allclose(p.coeffs, c, rtol=0, atol=1e-12 * np.abs(c).max())

    def test_zero(self):
        assert np.all(l2_project(lambda x: np.zeros(x.shape[:-1]), self.space).coeffs == 0)

    def test_orthogonality_residual(self):
        f = random_spectral(2, 6, 1)
        p = l2_project(f, self.space)
        # (f - P f, phi_i) with an independent quadrature of f
        x, w = gauss_rule(self.space.basis.breaks, 24)
        X, Y = np.meshgrid(x, x, indexing="ij")
        pts = np.stack([X, Y], axis=-1)
        diff = (f.evaluate(pts) - p.evaluate(pts)) * np.outer(w, w)
        B = self.space.basis.evaluate(x)
        resid = np.einsum("pq,pi,qj->ij", diff, B, B)
        assert np.max(np.abs(resid)) <= 1e-10 * np.sqrt(np.sum(f.coeffs**2))

    @pytest.mark.parametrize("degree, order", [(2, 3), (3, 4), (4, 5)])
    def test_projection_error_order(self, degree, order):
        f = unit((1, 2))
        hs, errs = [], []
        for K in (4, 8, 16):
            s = FemSpace(2, degree, K)
            hs.append(s.h)
            errs.append(fem_vs_spectral_error(l2_project(f, s), f))
        assert slopes(hs, errs)[-1] == pytest.approx(order, abs=0.4)


class TestBiharmonicSolve:
    @pytest.mark.parametrize("degree, order", [(2, 2), (3, 4), (4, 5)])
    def test_l2_order(self, degree, order):
        f = unit((1, 2))
        lam2 = eigenvalue((1, 2)) ** 2
        exact = SpectralField(f.cutoff, f.coeffs / lam2)
        hs, errs = [], []
        for K in (4, 8, 16):
            s = FemSpace(2, degree, K)
            hs.append(s.h)
            errs.append(fem_vs_spectral_error(solve_biharmonic(f, s), exact))
        assert slopes(hs, errs)[-1] == pytest.approx(order, abs=0.4)

    @pytest.mark.parametrize("degree", [2, 3, 4])
    def test_energy_order(self, degree):
        f = unit((2, 1))
        exact = SpectralField(f.cutoff, f.coeffs / eigenvalue((2, 1)) ** 2)
        hs, errs = [], []
        for K in (4, 8, 16):
            s = FemSpace(2, degree, K)
            hs.append(s.h)
            errs.append(fem_vs_spectral_error(solve_biharmonic(f, s), exact, which="laplacian"))
        assert slopes(hs, errs)[-1] >= degree - 1 - 0.2

    def test_self_adjoint(self):
        s = FemSpace(2, 3, 6)
        f, g = random_spectral(2, 5, 2), random_spectral(2, 5, 3)
        lhs = solve_biharmonic(f, s).coeffs @ s.load(g)
        rhs = s.load(f) @ solve_biharmonic(g, s).coeffs
        assert lhs == pytest.approx(rhs, rel=1e-11)

    def test_stability(self):
        s = FemSpace(2, 3, 6)
        for seed in range(5):
            f = random_spectral(2, 8, seed)
            c = solve_biharmonic(f, s).coeffs
            discrete = np.sqrt(c @ (s.stiffness @ c))
            continuous = np.sqrt(np.sum((f.coeffs / f.cutoff.eigenvalues) ** 2))
            assert discrete <= continuous * (1 + 1e-12)

    def test_galerkin_residual(self):
        s = FemSpace(2, 4, 8)
        f = random_spectral(2, 6, 4)
        load = s.load(f)
        c = solve_biharmonic(f, s).coeffs
        assert np.linalg.norm(s.stiffness @ c - load) <= 1e-10 * np.linalg.norm(load)

    def test_three_dimensions(self):
        f = unit((1, 1, 1))
        s = FemSpace(3, 3, 4)
        exact = SpectralField(f.cutoff, f.coeffs / eigenvalue((1, 1, 1)) ** 2)
        err = fem_vs_spectral_error(solve_biharmonic(f, s), exact)
        assert err < 1e-3 * np.sqrt(np.sum(exact.coeffs**2))


class TestSpectralComparison:
    space = FemSpace(2, 3, 5)

    def test_zero_spectral(self):
        c = np.random.default_rng(5).standard_normal(self.space.ndof)
        zero = SpectralField.zeros(SpectralCutoff(2, 3))
        got = fem_vs_spectral_error(FemFunction(self.space, c), zero)
        assert got == pytest.approx(np.sqrt(c @ (self.space.mass @ c)), rel=1e-10)

    def test_zero_fem(self):
        got = fem_vs_spectral_error(FemFunction(self.space, np.zeros(self.space.ndof)), unit((3, 2)))
        assert got == pytest.approx(1.0, rel=1e-12)

    def test_gram_agrees(self):
        f = random_spectral(2, 4, 6)
        p = l2_project(f, self.space)
        a = fem_vs_spectral_error(p, f)
        b = fem_vs_spectral_error(p, f, method="gram")
        assert b == pytest.approx(a, rel=1e-6)

    def test_refuses_huge_cutoff(self):
        with pytest.raises(DofLimitError):
            fem_vs_spectral_error(FemFunction(self.space, np.zeros(self.space.ndof)), unit((1, 1), 4000),
                                  max_points_1d=2048)


class TestEigenpairs:
    def test_positive_and_above_continuous(self):
        lam2_min = eigenvalue((1, 1)) ** 2
        mins = []
        for K in (4, 8, 16):
            vals = discrete_eigenpairs(FemSpace(2, 3, K)).values
            assert np.all(vals > 0)
            mins.append(vals.min())
        assert np.all(np.array(mins) >= lam2_min * (1 - 1e-12))
        assert mins[0] >= mins[1] >= mins[2]

    def test_mass_orthonormal(self):
        s = FemSpace(2, 2, 5)
        e = discrete_eigenpairs(s)
        assert np.allclose(e.vectors.T @ s.mass @ e.vectors, np.eye(s.ndof), atol=1e-10)

    def test_guard(self):
        with pytest.raises(DofLimitError):
            discrete_eigenpairs(FemSpace(2, 3, 8), max_dofs=50)

    def test_matches_fine_time_stepping(self):
        # fine Backward Euler, Richardson-extrapolated to remove its first-order error
        s = FemSpace(2, 3, 4)
        w0, t = unit((1, 1)), 0.01
        exact = semidiscrete_homogeneous(w0, s, discrete_eigenpairs(s), [t])[0]
        coarse = deterministic_fd_path(w0, s, TimePartition.uniform_steps(t, 1000)).coeffs[-1]
        fine = deterministic_fd_path(w0, s, TimePartition.uniform_steps(t, 2000)).coeffs[-1]
        assert np.max(np.abs(fine - exact)) / np.max(np.abs(coarse - exact)) == pytest.approx(0.5, abs=0.01)
        assert np.max(np.abs(2 * fine - coarse - exact)) <= 1e-6


class TestStochasticScheme:
    grid = NoiseGrid(0.1, 2, 2)
    space = FemSpace(2, 3, 4)

    def test_zero_noise(self):
        r = NoiseRealization(self.grid, np.zeros(self.grid.shape))
        path = fully_discrete_path(r, self.space, TimePartition.uniform_steps(0.1, 4))
        assert np.all(path.coeffs == 0)

    def test_linearity(self):
        r = sample(self.grid, SeedSpec(3))
        p = TimePartition.uniform_steps(0.1, 3)
        a = fully_discrete_path(r, self.space, p).coeffs
        b = fully_discrete_path(r.scaled(2.0), self.space, p).coeffs
        assert np.allclose(b, 2 * a, rtol=1e-14, atol=0)

    def test_one_step_dense_oracle(self):
        r = sample(self.grid, SeedSpec(4))
        T = self.grid.T
        path = fully_discrete_path(r, self.space, TimePartition.uniform_steps(T, 1))
        b = self.space.basis
        z, w = leggauss(6)
        x = (b.breaks[:-1, None] + 0.125 * (z + 1)).ravel()  # element width 1/4
        wx = np.tile(0.125 * w, 4)
        B0, B2 = b.evaluate(x), b.evaluate(x, 2)
        Phi = np.einsum("pi,qj->pqij", B0, B0).reshape(x.size**2, -1)
        Lap = (np.einsum("pi,qj->pqij", B2, B0) + np.einsum("pi,qj->pqij", B0, B2)).reshape(x.size**2, -1)
        W = np.outer(wx, wx).ravel()
        M = (Phi * W[:, None]).T @ Phi
        K = (Lap * W[:, None]).T @ Lap
        # int_0^T W_hat dt is R summed over time cells divided by the cell area
        X, Y = np.meshgrid(x, x, indexing="ij")
        cell = (np.floor(X * 2).astype(int) * 2 + np.floor(Y * 2).astype(int)).ravel()
        forcing = r.R.sum(axis=0)[cell] / self.grid.dx**2
        load = Phi.T @ (W * forcing)
        expected = np.linalg.solve(M + T * K, load)
        assert np.allclose(path.coeffs[1], expected, rtol=1e-11, atol=1e-13 * np.abs(expected).max())

    def test_batch_matches_single(self):
        reals = [sample(self.grid, SeedSpec(1, k)) for k in range(3)]
        p = TimePartition.uniform_steps(0.1, 4)
        batch = fully_discrete_path(reals, self.space, p).coeffs
        assert batch.shape == (3, 5, self.space.ndof)
        assert np.allclose(batch[2], fully_discrete_path(reals[2], self.space, p).coeffs, rtol=1e-14)

    def test_rejects_mismatched_interval(self):
        with pytest.raises(ValueError):
            fully_discrete_path(sample(self.grid, SeedSpec(0)), self.space, TimePartition.uniform_steps(0.2, 2))

    @given(k=st.floats(1e-6, 1e3))
    @settings(max_examples=15, deadline=None)
    def test_unconditional_stability(self, k):
        c0 = np.random.default_rng(0).standard_normal(self.space.ndof)
        path = be_steps(self.space, TimePartition([0.0, k, 2 * k]), c0)
        norms = [np.sqrt(c @ (self.space.mass @ c)) for c in path]
        assert norms[2] <= norms[1] * (1 + 1e-12) <= norms[0] * (1 + 1e-12) ** 2


class TestDeterministicScheme:
    def test_zero_initial(self):
        s = FemSpace(2, 2, 4)
        path = deterministic_fd_path(lambda x: np.zeros(x.shape[:-1]), s, TimePartition.uniform_steps(0.1, 3))
        assert np.all(path.coeffs == 0)

    def test_energy_decay(self):
        s = FemSpace(2, 3, 6)
        path = deterministic_fd_path(random_spectral(2, 6, 7), s, TimePartition.uniform_steps(0.01, 10))
        norms = [np.sqrt(c @ (s.mass @ c)) for c in path.coeffs]
        assert np.all(np.diff(norms) <= 0)

    def test_distance_to_time_discrete_order(self):
        w0 = unit((1, 1))
        p = TimePartition.uniform_steps(0.1, 32)
        ref = deterministic_be(w0, p)
        hs, errs = [], []
        for K in (4, 8, 16):
            s = FemSpace(2, 3, K)
            path = deterministic_fd_path(w0, s, p)
            e = fem_vs_spectral_error(path.coeffs[1:], ref.field_at(1), s)  # shape check on a batch
            assert e.shape == (32,)
            per_step = np.array([fem_vs_spectral_error(path.coeffs[m], ref.field_at(m), s) for m in range(1, 33)])
            hs.append(s.h)
            errs.append(np.sqrt(np.sum(p.steps * per_step**2)))
        rep = fit_rate(ConvergenceStudy("h", hs, errs), theory=4.0)
        assert rep.passed
