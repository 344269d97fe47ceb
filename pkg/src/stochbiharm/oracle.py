"""Semi-analytic solutions in the sine eigenbasis.

With regularized noise every mode ``alpha`` obeys a scalar ODE driven by a forcing that is
constant on each noise time cell, so the mild solution and its Backward Euler
approximation have closed forms.  The building block is the deterministic response of
mode ``alpha`` at time ``t`` to a unit forcing on time cell ``T_n``::

    I_n(t) = int_{T_n, s < t} exp(-lambda^2 (t - s)) ds
           = exp(-lambda^2 (t - min(t, t_n))) * (1 - exp(-lambda^2 (min(t, t_n) - t_{n-1}))) / lambda^2

which is evaluated with ``expm1`` to stay accurate when ``lambda^2 dt`` is small.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ._validation import check_positive_int
from .noise import NoiseGrid, NoiseRealization, noise_spectral_coeffs
from .spectral import SpectralCutoff, SpectralField, semigroup_apply


@dataclass(frozen=True)
class TimePartition:
    """Nodes ``0 = tau_0 < ... < tau_M = T``."""

    nodes: np.ndarray
    uniform: bool = False

    def __post_init__(self):
        nodes = np.array(self.nodes, dtype=float)
        if nodes.ndim != 1 or nodes.size < 2 or nodes[0] != 0.0:
            raise ValueError("partition needs at least two nodes starting at 0")
        if np.any(np.diff(nodes) <= 0):
            raise ValueError("partition nodes must be strictly increasing")
        nodes.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        steps = np.diff(nodes)
        object.__setattr__(self, "uniform", bool(self.uniform or np.all(steps == steps[0])))

    @classmethod
    def uniform_steps(cls, T: float, M: int) -> "TimePartition":
        M = check_positive_int(M, "M")
        nodes = np.arange(M + 1) * (T / M)
        nodes[-1] = T
        return cls(nodes, uniform=True)

    @property
    def T(self) -> float:
        return float(self.nodes[-1])

    @property
    def M(self) -> int:
        return self.nodes.size - 1

    @property
    def steps(self) -> np.ndarray:
        if self.uniform:
            return np.full(self.M, self.T / self.M)
        return np.diff(self.nodes)

    @property
    def k_max(self) -> float:
        return float(self.steps.max())


@dataclass
class PathSolution:
    """Coefficients of a solution path at a sequence of times.

    ``coeffs`` has shape ``(len(times), n_coeffs)`` (spectral coefficients, or FEM degrees of
    freedom when produced by :mod:`stochbiharm.fem`), optionally with a leading replicate
    axis.
    """

    times: np.ndarray
    coeffs: np.ndarray
    cutoff: SpectralCutoff | None = None
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    def field_at(self, m: int) -> SpectralField:
        if self.cutoff is None:
            raise TypeError("path does not hold spectral coefficients")
        return SpectralField(self.cutoff, self.coeffs[m])

    def to_csv(self, path) -> None:
        """Rows ``time, alpha_1..alpha_d, coefficient`` (or ``time, dof, coefficient``)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if self.cutoff is not None:
                alphas = self.cutoff.alphas
                w.writerow(["time"] + [f"alpha{i + 1}" for i in range(self.cutoff.d)] + ["coefficient"])
                for t, row in zip(self.times, self.coeffs):
                    for a, c in zip(alphas, row):
                        w.writerow([format(t, ".17g"), *map(int, a), format(c, ".17g")])
            else:
                w.writerow(["time", "dof", "coefficient"])
                for t, row in zip(self.times, self.coeffs):
                    for i, c in enumerate(row):
                        w.writerow([format(t, ".17g"), i, format(c, ".17g")])

    def to_grid(self, points) -> np.ndarray:
        """Values at ``points`` (shape ``(..., d)``) for every stored time."""
        return np.stack([self.field_at(m).evaluate(points) for m in range(len(self))])


# -- exact time responses ---------------------------------------------------------------

def time_responses(lam2: np.ndarray, nodes: np.ndarray, t: float) -> np.ndarray:
    """``I_n(t)`` for every eigenvalue ``lam2`` (biharmonic, i.e. ``lambda^2``) and cell.

    Returns shape ``(lam2.size, len(nodes) - 1)``.
    """
    lam2 = np.asarray(lam2, dtype=float)[:, None]
    lo = nodes[:-1][None, :]
    hi = np.minimum(nodes[1:], t)[None, :]
    active = lo < t
    length = np.where(active, hi - lo, 0.0)
    lag = np.where(active, t - hi, 0.0)
    return np.where(active, np.exp(-lam2 * lag) * -np.expm1(-lam2 * length) / lam2, 0.0)


def _z_plus_expm1(z: np.ndarray) -> np.ndarray:
    """``z + expm1(-z)`` accurate for small ``z`` (Taylor series below 0.1)."""
    z = np.asarray(z, dtype=float)
    small = z < 0.1
    zs = np.where(small, z, 0.0)
    series = np.zeros_like(zs)
    term = zs * zs / 2.0
    for j in range(3, 14):
        series = series + term
        term = -term * zs / j
    return np.where(small, series, z + np.expm1(-np.where(small, 1.0, z)))


def response_integrals(lam2: np.ndarray, nodes: np.ndarray, a: float, b: float) -> np.ndarray:
    """``int_a^b I_n(tau) dtau`` in closed form, shape ``(lam2.size, len(nodes) - 1)``.

    On ``(t_{n-1}, t_n]`` the response is ``(1 - e^{-lam2 (tau - t_{n-1})}) / lam2`` and after
    ``t_n`` it is ``e^{-lam2 (tau - t_n)} (1 - e^{-lam2 dt_n}) / lam2``.
    """
    lam2 = np.asarray(lam2, dtype=float)[:, None]
    lo = nodes[:-1][None, :]
    hi = nodes[1:][None, :]
    # rising part over [max(a, lo), min(b, hi)]
    ra = np.clip(a, lo, hi)
    rb = np.clip(b, lo, hi)
    # written as h(z) + (1 - e^{-lam2 y})(1 - e^{-lam2 x}) to avoid cancelling x/lam2 terms
    x = lam2 * (rb - ra)
    y = lam2 * (ra - lo)
    rising = (_z_plus_expm1(x) + np.expm1(-y) * np.expm1(-x)) / lam2**2
    # decaying part over [max(a, hi), b]
    da = np.maximum(a, hi)
    db = np.maximum(b, hi)
    decay = (-np.expm1(-lam2 * (hi - lo)) / lam2) * (
        np.exp(-lam2 * (da - hi)) * -np.expm1(-lam2 * (db - da))
    ) / lam2
    return rising + decay


def overlap_matrix(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """``|(outer_{m-1}, outer_m) cap (inner_{n-1}, inner_n)|``, shape ``(M, N)``."""
    lo = np.maximum(outer[:-1, None], inner[None, :-1])
    hi = np.minimum(outer[1:, None], inner[None, 1:])
    return np.maximum(hi - lo, 0.0)


# -- stochastic paths ---------------------------------------------------------------------

def uhat_coeffs(r: NoiseRealization, t: float, cutoff: SpectralCutoff) -> SpectralField:
    """Mild solution of the regularized problem at time ``t``."""
    grid = r.grid
    if not 0.0 <= t <= grid.T:
        raise ValueError(f"t={t} outside [0, {grid.T}]")
    if t == 0.0:
        return SpectralField.zeros(cutoff)
    forcing = noise_spectral_coeffs(r, cutoff)
    resp = time_responses(cutoff.eigenvalues**2, grid.time_nodes, t)
    return SpectralField(cutoff, np.sum(resp * forcing.T, axis=1))


def uhat_path(forcing: np.ndarray, grid: NoiseGrid, times: Sequence[float],
              cutoff: SpectralCutoff) -> np.ndarray:
    """Mild solution at increasing ``times`` by exact propagation between breakpoints.

    ``forcing`` holds the noise coefficients per time cell with an optional leading batch
    axis, shape ``(..., N_star, cutoff.size)``.  Returns ``(..., len(times), cutoff.size)``.
    """
    return np.stack(list(iter_uhat_path(forcing, grid, times, cutoff)), axis=-2)


def iter_uhat_path(forcing: np.ndarray, grid: NoiseGrid, times: Sequence[float], cutoff: SpectralCutoff):
    """Yield the coefficients of :func:`uhat_path` one time at a time (memory stays per-time)."""
    times = np.asarray(times, dtype=float)
    if np.any(np.diff(times) < 0) or times[0] < 0 or times[-1] > grid.T * (1 + 1e-12):
        raise ValueError("times must be increasing within [0, T]")
    lam2 = cutoff.eigenvalues**2
    nodes = grid.time_nodes
    state = np.zeros(forcing.shape[:-2] + (cutoff.size,))
    t_now = 0.0
    for t_next in times:
        while t_now < t_next:
            n = min(int(np.searchsorted(nodes, t_now, side="right")) - 1, grid.N_star - 1)
            b = min(t_next, nodes[n + 1]) if n + 1 < nodes.size - 1 else t_next
            h = b - t_now
            if h <= 0:
                break
            state = np.exp(-lam2 * h) * state + (-np.expm1(-lam2 * h) / lam2) * forcing[..., n, :]
            t_now = b
        yield state.copy()


def timediscrete_coeffs(r: NoiseRealization, partition: TimePartition, cutoff: SpectralCutoff,
                        method: str = "recursion") -> PathSolution:
    """Backward Euler iterates ``U^m`` of the regularized problem in the eigenbasis.

    ``method="recursion"`` applies ``U^m = (U^{m-1} + int_{Delta_m} W_hat) / (1 + k_m lambda^2)``
    and accepts any partition; ``method="closed"`` sums resolvent powers and needs a
    uniform partition.
    """
    forcing = noise_spectral_coeffs(r, cutoff)
    loads = overlap_matrix(partition.nodes, r.grid.time_nodes) @ forcing
    coeffs = _be_iterates(loads, partition, cutoff, method)
    return PathSolution(partition.nodes.copy(), coeffs, cutoff,
                        {"scheme": "backward_euler", "uniform": partition.uniform, "method": method,
                         "seed": r.seed, "noise_grid": r.grid, "n_max": cutoff.n_max})


def _be_iterates(loads: np.ndarray, partition: TimePartition, cutoff: SpectralCutoff,
                 method: str) -> np.ndarray:
    """Backward Euler iterates from per-step loads of shape ``(..., M, size)``."""
    lam2 = cutoff.eigenvalues**2
    M = partition.M
    out = np.zeros(loads.shape[:-2] + (M + 1, cutoff.size))
    if method == "recursion":
        for m, k in enumerate(partition.steps, start=1):
            out[..., m, :] = (out[..., m - 1, :] + loads[..., m - 1, :]) / (1.0 + k * lam2)
    elif method == "closed":
        if not partition.uniform:
            raise ValueError("the resolvent-power form needs a uniform partition")
        k = partition.T / M
        inv = 1.0 / (1.0 + k * lam2)
        for m in range(1, M + 1):
            powers = inv[None, :] ** np.arange(m, 0, -1)[:, None]
            out[..., m, :] = np.sum(powers * loads[..., :m, :], axis=-2)
    else:
        raise ValueError(f"unknown method {method!r}")
    return out


# -- deterministic problem ----------------------------------------------------------------

def deterministic_exact(w0: SpectralField, t: float) -> SpectralField:
    return semigroup_apply(w0, t)


def deterministic_be(w0: SpectralField, partition: TimePartition) -> PathSolution:
    """``W^m = W^{m-1} / (1 + k_m lambda^2)``, ``W^0 = w0``."""
    lam2 = w0.cutoff.eigenvalues**2
    out = np.empty((partition.M + 1, w0.cutoff.size))
    out[0] = w0.coeffs
    for m, k in enumerate(partition.steps, start=1):
        out[m] = out[m - 1] / (1.0 + k * lam2)
    return PathSolution(partition.nodes.copy(), out, w0.cutoff, {"scheme": "backward_euler"})


def be_l2t_error(w0: SpectralField, partition: TimePartition) -> float:
    """``(sum_m k_m ||W^m - w(tau_m)||^2)^{1/2}`` evaluated coefficient-wise."""
    lam2 = w0.cutoff.eigenvalues**2
    steps = partition.steps
    W = w0.coeffs.copy()
    total = 0.0
    for m, k in enumerate(steps, start=1):
        W = W / (1.0 + k * lam2)
        exact = w0.coeffs * np.exp(-lam2 * partition.nodes[m])
        total += k * float(np.sum((W - exact) ** 2))
    return float(np.sqrt(total))


# -- second moments -----------------------------------------------------------------------

def alpha_blocks(cutoff: SpectralCutoff, grid: NoiseGrid, block: int = 65536):
    """Yield ``(lambda^2, bessel_factor)`` slices of the cutoff for chunked reductions."""
    lam2 = cutoff.eigenvalues**2
    bessel = cutoff.bessel_factors(grid.J_star)
    for start in range(0, cutoff.size, block):
        yield lam2[start:start + block], bessel[start:start + block]


def uhat_second_moments(grid: NoiseGrid, t: float, cutoff: SpectralCutoff) -> np.ndarray:
    """Per-mode ``E[uhat_alpha(t)^2] = S_alpha / dt * sum_n I_n(t)^2``."""
    lam2 = cutoff.eigenvalues**2
    resp = time_responses(lam2, grid.time_nodes, t)
    return cutoff.bessel_factors(grid.J_star) * np.sum(resp**2, axis=1) / grid.dt


def holder_moment_exact(grid: NoiseGrid, tau_a: float, tau_b: float, cutoff: SpectralCutoff) -> float:
    """``E ||uhat(tau_b) - uhat(tau_a)||^2`` by the Ito isometry."""
    if not 0.0 <= tau_a <= tau_b <= grid.T:
        raise ValueError("need 0 <= tau_a <= tau_b <= T")
    if tau_a == tau_b:
        return 0.0
    nodes = grid.time_nodes
    parts = []
    for lam2, bessel in alpha_blocks(cutoff, grid):
        diff = time_responses(lam2, nodes, tau_b) - time_responses(lam2, nodes, tau_a)
        parts.append(bessel * np.sum(diff**2, axis=1))
    return float(np.sum(np.concatenate(parts)) / grid.dt)
