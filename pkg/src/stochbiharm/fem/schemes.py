"""Backward Euler and exact-in-time evolutions on the spline space."""
from __future__ import annotations

from typing import Sequence

import numpy as np

from ..noise import NoiseGrid, NoiseRealization
from ..oracle import PathSolution, TimePartition, overlap_matrix, time_responses
from .space import DiscreteEigenpairs, FemSpace, l2_project


def noise_step_loads(space: FemSpace, R: np.ndarray, grid: NoiseGrid, partition: TimePartition) -> np.ndarray:
    """``(int_{Delta_m} W_hat ds, phi_i)`` for every step.

    ``R`` holds noise increments with shape ``(..., N_star, J^d)``; the result has shape
    ``(..., M, ndof)``.  Time overlaps are exact interval intersections and the spatial
    integrals are exact (splines are polynomial between the merged knot/cell breakpoints).
    """
    if space.d != grid.d:
        raise ValueError("space and noise grid dimensions differ")
    R = np.asarray(R, dtype=float)
    lead = R.shape[:-2]
    cell_loads = space.cell_loads(R.reshape(-1, grid.n_space_cells) / grid.cell_volume, grid.J_star)
    cell_loads = cell_loads.reshape(lead + (grid.N_star, space.ndof))
    O = overlap_matrix(partition.nodes, grid.time_nodes)
    return np.einsum("mn,...ni->...mi", O, cell_loads)


def be_steps(space: FemSpace, partition: TimePartition, c0: np.ndarray, loads: np.ndarray | None = None) -> np.ndarray:
    """Iterate ``(M + k_m K) c^m = M c^{m-1} + load^m``.

    ``c0`` has shape ``(ndof,)`` or ``(batch, ndof)``; ``loads`` (optional) has shape
    ``(M, ndof)`` or ``(batch, M, ndof)``.  Returns ``(M + 1, ndof)`` or ``(batch, M + 1, ndof)``.
    """
    c0 = np.asarray(c0, dtype=float)
    batched = c0.ndim == 2
    state = c0.T if batched else c0
    out = [state.copy()]
    for m, k in enumerate(partition.steps):
        rhs = space.mass @ state
        if loads is not None:
            rhs = rhs + (loads[:, m, :].T if batched else loads[m])
        state = space.solve_step(k, rhs)
        out.append(state)
    arr = np.stack(out)  # (M+1, ndof[, batch])
    return np.moveaxis(arr, -1, 0) if batched else arr


def fully_discrete_path(r: NoiseRealization | Sequence[NoiseRealization], space: FemSpace,
                        partition: TimePartition) -> PathSolution:
    """Fully-discrete Backward Euler path with ``U_h^0 = 0``.

    A sequence of realizations on one grid is solved as a batch; ``coeffs`` then has a
    leading replicate axis.
    """
    batch = not isinstance(r, NoiseRealization)
    reals = list(r) if batch else [r]
    grid = reals[0].grid
    if any(x.grid != grid for x in reals):
        raise ValueError("batched realizations must share a noise grid")
    if abs(partition.T - grid.T) > 1e-12 * grid.T:
        raise ValueError("partition and noise grid cover different time intervals")
    R = np.stack([x.R for x in reals])
    loads = noise_step_loads(space, R, grid, partition)
    coeffs = be_steps(space, partition, np.zeros((len(reals), space.ndof)), loads)
    return PathSolution(partition.nodes.copy(), coeffs if batch else coeffs[0], None,
                        {"scheme": "fem_backward_euler", "space": space, "noise_grid": grid,
                         "seeds": [x.seed for x in reals]})


def deterministic_fd_path(w0, space: FemSpace, partition: TimePartition) -> PathSolution:
    """``W_h^0 = P_h w0`` followed by unforced Backward Euler steps."""
    c0 = l2_project(w0, space).coeffs
    return PathSolution(partition.nodes.copy(), be_steps(space, partition, c0), None,
                        {"scheme": "fem_backward_euler", "space": space})


def semidiscrete_homogeneous(w0, space: FemSpace, eig: DiscreteEigenpairs, times) -> np.ndarray:
    """``w_h(t) = sum_l exp(-lambda_l t) (P_h w0, chi_l) chi_l`` at each time, shape ``(len(times), ndof)``."""
    c0 = l2_project(w0, space).coeffs
    modal = eig.vectors.T @ (space.mass @ c0)
    decay = np.exp(-np.outer(np.asarray(times, dtype=float), eig.values))
    return (decay * modal) @ eig.vectors.T


def semidiscrete_noise_path(R: np.ndarray, grid: NoiseGrid, space: FemSpace, eig: DiscreteEigenpairs,
                            times) -> np.ndarray:
    """Exact semidiscrete solution driven by the regularized noise (Duhamel in the discrete eigenbasis).

    ``R`` has shape ``(..., N_star, J^d)``; returns ``(..., len(times), ndof)``.
    """
    R = np.asarray(R, dtype=float)
    lead = R.shape[:-2]
    loads = space.cell_loads(R.reshape(-1, grid.n_space_cells) / grid.cell_volume, grid.J_star)
    modal_forcing = (loads @ eig.vectors).reshape(lead + (grid.N_star, space.ndof))
    out = []
    for t in np.asarray(times, dtype=float):
        resp = time_responses(eig.values, grid.time_nodes, t)  # (ndof, N)
        modal = np.einsum("ln,...nl->...l", resp, modal_forcing)
        out.append(modal @ eig.vectors.T)
    return np.stack(out, axis=-2)

