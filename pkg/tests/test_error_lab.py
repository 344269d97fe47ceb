import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial.legendre import leggauss

from stochbiharm import error_lab
from stochbiharm.error_lab import (
    CutoffError,
    ErrorMode,
    MCEstimate,
    consistency_sigma,
    det_fem_study,
    det_fulldisc_error,
    det_semidiscrete_error,
    fulldisc_error_mc,
    modeling_error_exact,
    modeling_error_terms,
    semidiscrete_error_mc,
    sum_squared_responses,
    timedisc_error_exact,
    timedisc_vs_fulldisc_mc,
    uhat_moment_exact,
    uhat_moment_mc,
)
from stochbiharm.fem import (
    FemSpace,
    SolverError,
    deterministic_fd_path,
    discrete_eigenpairs,
    fem_vs_spectral_error,
    fully_discrete_path,
    semidiscrete_homogeneous,
    semidiscrete_noise_path,
)
from stochbiharm.noise import NoiseGrid, SeedSpec, contract_cells, sample
from stochbiharm.oracle import TimePartition, deterministic_be, response_integrals, time_responses, uhat_path
from stochbiharm.rates import ConvergenceStudy, fit_rate
from stochbiharm.spectral import SpectralCutoff, SpectralField, cell_integrals_1d


def graded_rule(T, finest=1e-13, pieces=80, q=20):
    """Gauss rule on [0, T] graded geometrically towards 0."""
    breaks = np.concatenate([[0.0], np.geomspace(finest, T, pieces)])
    z, w = leggauss(q)
    a, h = breaks[:-1, None], np.diff(breaks)[:, None]
    return (a + 0.5 * h * (z + 1)).ravel(), (0.5 * h * w).ravel()


def forcing_batch(grid, cutoff, seed, replicates):
    R = np.stack([sample(grid, SeedSpec(seed, k)).R for k in range(replicates)])
    B = cell_integrals_1d(cutoff.n_max, grid.J_star)
    flat = R.reshape(-1, grid.n_space_cells) / grid.cell_volume
    return R, contract_cells(flat, B, grid.d).reshape(replicates, grid.N_star, cutoff.size)


class TestModelingError:
    def test_single_cell_quadrature_oracle(self):
        # sum over alpha of int int (K - cell mean of K)^2 ds dy, with x handled by orthonormality
        T, n = 0.1, 32
        grid = NoiseGrid(T, 1, 1)
        u, wu = graded_rule(T)  # u = T - s
        z, wz = leggauss(400)
        x = 0.5 * (z + 1)
        a = np.arange(1, n + 1)
        sines = np.sqrt(2) * np.sin(np.pi * np.outer(a, x))
        b1 = sines @ (0.5 * wz)                 # int_0^1 sqrt2 sin(a pi y) dy
        b2 = (sines**2) @ (0.5 * wz)            # = 1
        c = SpectralCutoff(2, n)
        lam2 = c.eigenvalues**2
        A1 = np.exp(-np.outer(lam2, u)) @ wu
        A2 = np.exp(-2 * np.outer(lam2, u)) @ wu
        B1 = np.outer(b1, b1).ravel()
        B2 = np.outer(b2, b2).ravel()
        # int (e phi - m)^2 with m the space-time mean of e phi
        oracle = np.sum(A2 * B2 - (A1 * B1) ** 2 / T)
        got = modeling_error_exact(grid, T, c, check_tail=False)
        assert got == pytest.approx(oracle, rel=1e-9)

    def test_joint_refinement_decreases(self):
        vals = [modeling_error_exact(NoiseGrid(0.1, n, n), 0.1, SpectralCutoff(2, 64)) for n in (1, 2, 4, 8, 16)]
        assert np.all(np.diff(vals) < 0)
        assert vals[-1] < 0.6 * vals[0]

    def test_time_slope(self):
        Ns = [4, 8, 16, 32]
        vals = [modeling_error_exact(NoiseGrid(0.01, N, 32), 0.01, SpectralCutoff(2, 128)) for N in Ns]
        rep = fit_rate(ConvergenceStudy("dt", 0.01 / np.array(Ns), vals), theory=0.5)
        assert rep.passed

    @given(N=st.integers(1, 12), J=st.integers(1, 12), frac=st.floats(0.01, 1.0))
    @settings(max_examples=30, deadline=None)
    def test_terms_nonnegative(self, N, J, frac):
        grid = NoiseGrid(0.05, N, J)
        terms = modeling_error_terms(grid, 0.05 * frac, SpectralCutoff(2, 24))
        assert terms.min() >= -1e-14

    def test_symmetric_summation_matches_full(self):
        grid, c = NoiseGrid(0.05, 3, 5, d=3), SpectralCutoff(3, 20)
        full = np.sum(np.maximum(modeling_error_terms(grid, 0.04, c), 0))
        assert modeling_error_exact(grid, 0.04, c, check_tail=False) == pytest.approx(full, rel=1e-12)

    def test_refuses_coarse_cutoff(self):
        with pytest.raises(CutoffError):
            modeling_error_exact(NoiseGrid(0.1, 4, 4), 0.1, SpectralCutoff(2, 2))

    def test_rejects_bad_time(self):
        with pytest.raises(ValueError):
            modeling_error_exact(NoiseGrid(0.1, 4, 4), 0.0, SpectralCutoff(2, 8))


class TestSumSquaredResponses:
    @given(N=st.integers(1, 50), frac=st.floats(0.0, 1.0))
    @settings(max_examples=40, deadline=None)
    def test_matches_direct_sum(self, N, frac):
        grid = NoiseGrid(0.2, N, 2)
        lam2 = np.array([1e-3, 1.0, 400.0, 1e5])
        t = 0.2 * frac
        direct = np.sum(time_responses(lam2, grid.time_nodes, t) ** 2, axis=1)
        assert np.allclose(sum_squared_responses(lam2, grid, t), direct, rtol=1e-11, atol=0)

    def test_huge_cell_count(self):
        grid = NoiseGrid(0.1, 2**40, 2)
        # with dt -> 0 the regularized moment approaches the exact one per mode
        lam2 = np.array([400.0])
        got = sum_squared_responses(lam2, grid, 0.1)[0] / grid.dt
        assert got == pytest.approx(-np.expm1(-2 * 400.0 * 0.1) / 800.0, rel=1e-6)


class TestTimeDiscreteError:
    def test_zero_at_start(self):
        out = timedisc_error_exact(NoiseGrid(0.1, 4, 4), TimePartition.uniform_steps(0.1, 8), SpectralCutoff(2, 32),
                                   check_tail=False)
        assert out[0] == 0.0 and np.all(out[1:] > 0)

    def test_one_step_single_cell(self):
        T, n = 0.1, 12
        c = SpectralCutoff(2, n)
        lam2 = c.eigenvalues**2
        a = np.arange(1, n + 1)
        b1 = np.sqrt(2) * (1 - (-1.0) ** a) / (a * np.pi)
        S = np.outer(b1**2, b1**2).ravel()
        by_hand = np.sum(S / T * (T / (1 + T * lam2) + np.expm1(-lam2 * T) / lam2) ** 2)
        got = timedisc_error_exact(NoiseGrid(T, 1, 1), TimePartition.uniform_steps(T, 1), c, check_tail=False)
        assert got[1] == pytest.approx(by_hand, rel=1e-12)

    def test_slope(self):
        grid, c = NoiseGrid(0.1, 64, 16), SpectralCutoff(2, 96)
        Ms = [4, 8, 16, 32]
        vals = [timedisc_error_exact(grid, TimePartition.uniform_steps(0.1, M), c, check_tail=False)[-1] for M in Ms]
        rep = fit_rate(ConvergenceStudy("k", 0.1 / np.array(Ms), vals), theory=0.5)
        assert rep.slope > 0.2

    def test_refuses_coarse_cutoff(self):
        with pytest.raises(CutoffError):
            timedisc_error_exact(NoiseGrid(0.1, 4, 4), TimePartition.uniform_steps(0.1, 8), SpectralCutoff(2, 32))

    def test_rejects_mismatched_interval(self):
        with pytest.raises(ValueError):
            timedisc_error_exact(NoiseGrid(0.1, 4, 4), TimePartition.uniform_steps(0.2, 4), SpectralCutoff(2, 8))


class TestConsistency:
    grid = NoiseGrid(0.1, 4, 4)
    part = TimePartition.uniform_steps(0.1, 4)

    def test_later_cells_do_not_contribute(self):
        lam2 = np.array([2.0, 300.0, 5e4])
        nodes = self.grid.time_nodes
        a, b = 0.025, 0.05
        resp = (b - a) * time_responses(lam2, nodes, b) - response_integrals(lam2, nodes, a, b)
        assert np.all(resp[:, 2:] == 0.0)

    def test_gauss_matches_closed_form(self):
        c = SpectralCutoff(2, 2)
        exact = consistency_sigma(self.grid, self.part, 2, c, check_tail=False)
        gauss = consistency_sigma(self.grid, self.part, 2, c, time_quadrature=32, check_tail=False)
        assert gauss == pytest.approx(exact, rel=1e-10)

    def test_gauss_refuses_when_unconverged(self):
        with pytest.raises(CutoffError):
            consistency_sigma(self.grid, self.part, 2, SpectralCutoff(2, 32), time_quadrature=6, check_tail=False)

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            consistency_sigma(self.grid, self.part, 0, SpectralCutoff(2, 4))

    def test_scaling_bounded(self):
        grid, c = NoiseGrid(0.1, 256, 16), SpectralCutoff(2, 128)
        ratios = [consistency_sigma(grid, TimePartition.uniform_steps(0.1, M), M, c) / (0.1 / M) ** 2.5
                  for M in (16, 32, 64, 128)]
        assert max(ratios) / min(ratios) < 1.5

    def test_against_monte_carlo(self):
        c = SpectralCutoff(2, 6)
        m = 3
        a, b = self.part.nodes[m - 1], self.part.nodes[m]
        z, w = leggauss(12)
        taus = a + 0.5 * (b - a) * (z + 1)  # one noise cell covers the whole step
        _, forcing = forcing_batch(self.grid, c, 17, 10_000)
        path = uhat_path(forcing, self.grid, np.concatenate([taus, [b]]), c)
        integral = np.einsum("q,bqa->ba", 0.5 * (b - a) * w, path[:, :-1])
        sq = np.sum(((b - a) * path[:, -1] - integral) ** 2, axis=1)
        est = MCEstimate.from_samples(sq, n_boot=400)
        exact = consistency_sigma(self.grid, self.part, m, c, check_tail=False)
        assert abs(est.mean - exact) <= 3 * est.std_error


class TestMonteCarlo:
    def test_uhat_moment(self):
        grid, c = NoiseGrid(0.1, 4, 4), SpectralCutoff(2, 16)
        est = uhat_moment_mc(grid, 0.1, c, 3, 10_000, n_boot=300)
        assert abs(est.mean - uhat_moment_exact(grid, 0.1, c)) <= 3 * est.std_error

    def test_bootstrap_deterministic(self):
        x = np.random.default_rng(0).exponential(size=200)
        a, b = MCEstimate.from_samples(x, 200), MCEstimate.from_samples(x, 200)
        assert a.std_error == b.std_error and a.ci_low <= a.mean <= a.ci_high
        assert a.std_error == pytest.approx(x.std(ddof=1) / np.sqrt(200), rel=0.2)

    def test_error_mode(self):
        assert ErrorMode().tag == "exact_covariance"
        with pytest.raises(ValueError):
            ErrorMode("monte_carlo", replicates=1)
        with pytest.raises(ValueError):
            ErrorMode("bayesian")


class TestFullDiscrete:
    grid = NoiseGrid(0.1, 4, 4)
    space = FemSpace(2, 3, 4)
    part = TimePartition.uniform_steps(0.1, 8)
    cutoff = SpectralCutoff(2, 16)

    def test_zero_noise(self):
        out = fulldisc_error_mc(self.grid, self.space, self.part, self.cutoff, 0, 4, n_boot=10, zero_noise=True)
        assert np.all(out.per_step.mean == 0) and out.l2t.mean == 0 and out.linf.mean == 0

    def test_matches_direct_coupling(self):
        out = fulldisc_error_mc(self.grid, self.space, self.part, self.cutoff, 5, 3, n_boot=10)
        reals = [sample(self.grid, SeedSpec(5, k)) for k in range(3)]
        U = fully_discrete_path(reals, self.space, self.part).coeffs
        _, forcing = forcing_batch(self.grid, self.cutoff, 5, 3)
        uhat = uhat_path(forcing, self.grid, self.part.nodes, self.cutoff)
        m = 5
        direct = [fem_vs_spectral_error(U[k, m], SpectralField(self.cutoff, uhat[k, m]), self.space) ** 2
                  for k in range(3)]
        assert out.per_step.samples[:, m] == pytest.approx(direct, rel=1e-6)
        assert out.l2t.mean == pytest.approx(np.sum(self.part.steps * out.per_step.mean[1:]), rel=1e-14)

    def test_workers_do_not_change_result(self):
        a = fulldisc_error_mc(self.grid, self.space, self.part, self.cutoff, 1, 6, n_boot=10, batch=2)
        b = fulldisc_error_mc(self.grid, self.space, self.part, self.cutoff, 1, 6, n_boot=10, batch=2, workers=3)
        assert np.array_equal(a.per_step.samples, b.per_step.samples)

    def test_needs_two_replicates(self):
        with pytest.raises(ValueError):
            fulldisc_error_mc(self.grid, self.space, self.part, self.cutoff, 0, 1)

    def test_solver_failure_names_replicates(self, monkeypatch):
        def broken(*args, **kwargs):
            raise SolverError("singular")
        monkeypatch.setattr(error_lab, "be_steps", broken)
        with pytest.raises(RuntimeError, match="replicates 0..1"):
            fulldisc_error_mc(self.grid, self.space, self.part, self.cutoff, 0, 6, batch=2)

    def test_time_vs_full_tail_diagnostic(self):
        out = timedisc_vs_fulldisc_mc(self.grid, FemSpace(2, 3, 8), self.part, SpectralCutoff(2, 4), 0, 4, n_boot=10)
        assert 0 < out.extra["tail_fraction"] < 1
        assert out.per_step.mean[0] == 0 and np.all(out.per_step.mean[1:] > 0)


class TestSemidiscrete:
    grid = NoiseGrid(0.1, 4, 4)
    space = FemSpace(2, 3, 4)
    cutoff = SpectralCutoff(2, 16)

    def test_zero_at_start(self):
        est = semidiscrete_error_mc(self.grid, self.space, [0.0, 0.1], self.cutoff, 0, 4, n_boot=10)
        assert np.all(est.samples[:, 0] == 0)

    def test_triangle_inequality(self):
        reps, part = 20, TimePartition.uniform_steps(0.1, 16)
        semi = semidiscrete_error_mc(self.grid, self.space, [0.1], self.cutoff, 8, reps, n_boot=10).mean[0]
        full = fulldisc_error_mc(self.grid, self.space, part, self.cutoff, 8, reps, n_boot=10).per_step.mean[-1]
        R, _ = forcing_batch(self.grid, self.cutoff, 8, reps)
        eig = discrete_eigenpairs(self.space)
        uh = semidiscrete_noise_path(R, self.grid, self.space, eig, [0.1])[:, 0]
        Uh = fully_discrete_path([sample(self.grid, SeedSpec(8, k)) for k in range(reps)], self.space, part).coeffs[:, -1]
        d = uh - Uh
        time_err = np.mean(np.sum(d * (self.space.mass @ d.T).T, axis=1))
        assert np.sqrt(semi) <= np.sqrt(full) + np.sqrt(time_err) + 1e-12


class TestDeterministicStudies:
    w0 = SpectralField.unit(SpectralCutoff(2, 1), (1, 1))

    def test_zero_initial_condition(self):
        zero = SpectralField.zeros(SpectralCutoff(2, 1))
        s = FemSpace(2, 3, 4)
        assert det_semidiscrete_error(zero, s, 0.1) == 0.0
        assert det_fulldisc_error(zero, s, TimePartition.uniform_steps(0.1, 4)) == 0.0

    def test_fulldisc_split_matches_direct(self):
        s, p = FemSpace(2, 3, 4), TimePartition.uniform_steps(0.05, 10)
        C = deterministic_fd_path(self.w0, s, p).coeffs
        W = deterministic_be(self.w0, p)
        direct = np.sqrt(sum(k * fem_vs_spectral_error(C[m], W.field_at(m), s) ** 2
                             for m, k in enumerate(p.steps, start=1)))
        assert det_fulldisc_error(self.w0, s, p) == pytest.approx(direct, rel=1e-8)

    def test_semidiscrete_split_matches_direct(self):
        s, T = FemSpace(2, 2, 4), 0.05
        eig = discrete_eigenpairs(s)
        z, w = leggauss(40)
        pieces = np.geomspace(1e-6, T, 12)
        pieces = np.concatenate([[0.0], pieces])
        total = 0.0
        for lo, hi in zip(pieces[:-1], pieces[1:]):
            tt = lo + 0.5 * (hi - lo) * (z + 1)
            wh = semidiscrete_homogeneous(self.w0, s, eig, tt)
            for ti, wi, row in zip(tt, w, wh):
                exact = SpectralField(self.w0.cutoff, self.w0.coeffs * np.exp(-self.w0.cutoff.eigenvalues**2 * ti))
                total += 0.5 * (hi - lo) * wi * fem_vs_spectral_error(row, exact, s) ** 2
        assert det_semidiscrete_error(self.w0, s, T) == pytest.approx(np.sqrt(total), rel=1e-6)

    def test_study_quadratic_splines(self):
        out = det_fem_study(self.w0, 2, [4, 8, 16], TimePartition.uniform_steps(0.1, 32))
        assert out["semidiscrete"].passed and out["fully_discrete"].passed
        assert out["semidiscrete"].slope == pytest.approx(2.0, abs=0.5)
