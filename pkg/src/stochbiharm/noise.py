"""Piecewise-constant regularization of space-time white noise.

The noise grid tiles ``[0, T] x (0, 1)^d`` into cells ``S_{n,mu} = T_n x D_mu``.  One
realization is the array ``R[n, mu]`` of iid ``N(0, dt dx^d)`` cell integrals of the white
noise; the regularized field equals ``R[n, mu] / (dt dx^d)`` on each cell.

Cell membership is left-closed in every coordinate with the last cell also right-closed,
so every point of the closed domain belongs to exactly one cell.

Random numbers come from a Philox counter-based stream keyed by the master seed with the
replicate id in the counter, so the draw of cell ``c`` in replicate ``k`` is a pure function of
``(master_seed, k, c)``.  Gaussians are obtained by the inverse normal CDF of one uniform
per cell.
"""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.special import ndtri

from ._validation import check_dimension, check_points, check_positive_int
from .spectral import SpectralCutoff, cell_integrals_1d

_KEY_SALT = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1
_HEADER = struct.Struct("<8sIIQQdQQ")
_MAGIC = b"SBHNOISE"


@dataclass(frozen=True)
class NoiseGrid:
    T: float
    N_star: int
    J_star: int
    d: int = 2

    def __post_init__(self):
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")
        check_positive_int(self.N_star, "N_star")
        check_positive_int(self.J_star, "J_star")
        check_dimension(self.d)

    @property
    def dt(self) -> float:
        return self.T / self.N_star

    @property
    def dx(self) -> float:
        return 1.0 / self.J_star

    @property
    def cell_volume(self) -> float:
        return self.dt * self.dx**self.d

    @property
    def n_space_cells(self) -> int:
        return self.J_star**self.d

    @property
    def shape(self) -> tuple[int, int]:
        return (self.N_star, self.n_space_cells)

    @property
    def time_nodes(self) -> np.ndarray:
        return np.arange(self.N_star + 1) * self.dt

    def time_cell(self, t) -> np.ndarray:
        """0-based index ``n`` with ``t`` in ``[t_n, t_{n+1})`` (last cell closed)."""
        return np.minimum(np.floor(np.asarray(t, dtype=float) / self.dt).astype(int), self.N_star - 1)

    def space_cell(self, x) -> np.ndarray:
        """Flat 0-based lexicographic index of the spatial cell containing ``x``."""
        pts = np.asarray(x, dtype=float)
        idx = np.minimum(np.floor(pts * self.J_star).astype(int), self.J_star - 1)
        return np.ravel_multi_index(tuple(np.moveaxis(idx, -1, 0)), (self.J_star,) * self.d)


@dataclass(frozen=True)
class SeedSpec:
    master_seed: int
    replicate_id: int = 0

    def __post_init__(self):
        if not (0 <= int(self.master_seed) <= _MASK64):
            raise ValueError("master_seed must fit in an unsigned 64-bit integer")
        if int(self.replicate_id) < 0:
            raise ValueError("replicate_id must be non-negative")

    def bit_generator(self) -> np.random.Philox:
        return np.random.Philox(
            key=np.array([int(self.master_seed) & _MASK64, _KEY_SALT], dtype=np.uint64),
            counter=np.array([0, 0, 0, int(self.replicate_id)], dtype=np.uint64),
        )


@dataclass(frozen=True)
class NoiseRealization:
    grid: NoiseGrid
    R: np.ndarray = field(repr=False)
    seed: SeedSpec | None = None

    def __post_init__(self):
        R = np.array(self.R, dtype=float)
        if R.shape != self.grid.shape:
            raise ValueError(f"R has shape {R.shape}, grid expects {self.grid.shape}")
        if not np.all(np.isfinite(R)):
            raise ValueError("noise increments must be finite")
        R.setflags(write=False)
        object.__setattr__(self, "R", R)

    @property
    def values(self) -> np.ndarray:
        """Cell values of the regularized noise, ``R / (dt dx^d)``."""
        return self.R / self.grid.cell_volume

    def scaled(self, factor: float) -> "NoiseRealization":
        return NoiseRealization(self.grid, self.R * factor, self.seed)

    # -- serialization ---------------------------------------------------------------
    def to_bytes(self) -> bytes:
        seed = self.seed or SeedSpec(0, 0)
        head = _HEADER.pack(_MAGIC, 1, self.grid.d, self.grid.N_star, self.grid.J_star,
                            float(self.grid.T), int(seed.master_seed), int(seed.replicate_id))
        return head + np.ascontiguousarray(self.R, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "NoiseRealization":
        magic, version, d, N, J, T, seed, rep = _HEADER.unpack_from(blob)
        if magic != _MAGIC or version != 1:
            raise ValueError("not a noise realization file")
        grid = NoiseGrid(T, N, J, d)
        payload = np.frombuffer(blob, dtype="<f8", offset=_HEADER.size)
        return cls(grid, payload.reshape(grid.shape), SeedSpec(seed, rep))

    def write_binary(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def read_binary(cls, path) -> "NoiseRealization":
        return cls.from_bytes(Path(path).read_bytes())

    def write_csv(self, path) -> None:
        """One row per cell: ``n, mu_1..mu_d, R`` with 1-based indices."""
        g = self.grid
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow([f"# d={g.d} N_star={g.N_star} J_star={g.J_star} T={g.T!r}"])
            w.writerow(["n"] + [f"mu{i + 1}" for i in range(g.d)] + ["R"])
            for n in range(g.N_star):
                for c in range(g.n_space_cells):
                    mu = np.unravel_index(c, (g.J_star,) * g.d)
                    w.writerow([n + 1, *(int(m) + 1 for m in mu), format(self.R[n, c], ".17g")])

    @classmethod
    def read_csv(cls, path) -> "NoiseRealization":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        meta = dict(kv.split("=") for kv in rows[0][0].lstrip("# ").split())
        grid = NoiseGrid(float(meta["T"]), int(meta["N_star"]), int(meta["J_star"]), int(meta["d"]))
        R = np.zeros(grid.shape)
        for row in rows[2:]:
            n = int(row[0]) - 1
            mu = tuple(int(m) - 1 for m in row[1:-1])
            R[n, np.ravel_multi_index(mu, (grid.J_star,) * grid.d)] = float(row[-1])
        return cls(grid, R)


def standard_normals(seed: SeedSpec, n: int) -> np.ndarray:
    """``n`` standard normal draws, entry ``c`` depending only on ``(seed, c)``."""
    raw = seed.bit_generator().random_raw(n)
    u = ((raw >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53
    return ndtri(u)


def sample(grid: NoiseGrid, seed: SeedSpec) -> NoiseRealization:
    """Draw the cell integrals ``R[n, mu] ~ N(0, dt dx^d)`` independently."""
    z = standard_normals(seed, grid.N_star * grid.n_space_cells)
    return NoiseRealization(grid, np.sqrt(grid.cell_volume) * z.reshape(grid.shape), seed)


def sample_many(grid: NoiseGrid, master_seed: int, replicates) -> list[NoiseRealization]:
    return [sample(grid, SeedSpec(master_seed, int(k))) for k in replicates]


def eval_What(r: NoiseRealization, t, x) -> np.ndarray | float:
    """Value of the regularized noise at ``(t, x)``."""
    g = r.grid
    t = np.asarray(t, dtype=float)
    if np.any(t < 0) or np.any(t > g.T):
        raise ValueError(f"time outside [0, {g.T}]")
    pts = check_points(x, g.d)
    vals = r.values[g.time_cell(t), g.space_cell(pts)]
    return float(vals) if np.ndim(vals) == 0 else vals


# -- projection onto cell means ------------------------------------------------------

CellFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]


def _cell_quadrature(grid: NoiseGrid, degree: int):
    """Reference Gauss nodes/weights on one cell, normalized to unit total weight."""
    z, w = leggauss(degree)
    z = 0.5 * (z + 1.0)
    w = 0.5 * w
    grids = np.meshgrid(*([z] * (grid.d + 1)), indexing="ij")
    wgrid = np.ones_like(grids[0])
    for wg in np.meshgrid(*([w] * (grid.d + 1)), indexing="ij"):
        wgrid = wgrid * wg
    return np.stack([g.ravel() for g in grids], axis=1), wgrid.ravel()


def cell_means(g: CellFunction | np.ndarray, grid: NoiseGrid, degree: int = 8) -> np.ndarray:
    """Cell means of ``g`` (the projection onto piecewise constants), shape ``grid.shape``.

    ``g`` is either a vectorized callable ``g(t, x)`` (``t`` of shape ``(...)``, ``x`` of shape
    ``(..., d)``) or an array of cell values on ``grid``, which is returned unchanged.
    """
    if not callable(g):
        arr = np.array(g, dtype=float)
        if arr.shape != grid.shape:
            raise ValueError(f"cell array has shape {arr.shape}, expected {grid.shape}")
        return arr
    ref, w = _cell_quadrature(grid, degree)
    J = grid.J_star
    origins_x = np.stack(np.meshgrid(*([np.arange(J)] * grid.d), indexing="ij"), -1).reshape(-1, grid.d) / J
    out = np.empty(grid.shape)
    for n in range(grid.N_star):
        t = (n + ref[:, 0]) * grid.dt
        x = origins_x[:, None, :] + ref[None, :, 1:] * grid.dx
        vals = np.asarray(g(np.broadcast_to(t, x.shape[:-1]), x), dtype=float)
        # mean = v_0 + sum w (v - v_0): exact for constants
        out[n] = vals[:, 0] + (vals - vals[:, :1]) @ w
    return out


def project_pihat(g: CellFunction | np.ndarray, grid: NoiseGrid, degree: int = 8) -> np.ndarray:
    """Alias of :func:`cell_means`; the projection is idempotent on cell arrays."""
    return cell_means(g, grid, degree)


def ito_pair_sides(r: NoiseRealization, g: CellFunction | np.ndarray, degree: int = 12) -> tuple[float, float]:
    """Both sides of ``int Pi(g) dW = int W_hat g``.

    Left: ``sum mean(g) R``.  Right: ``sum (R / vol) * int_S g`` with the cell integrals taken
    by a separate composite Gauss rule (each cell split in two per coordinate).
    """
    grid = r.grid
    left = float(np.sum(cell_means(g, grid, degree) * r.R))
    if callable(g):
        fine = NoiseGrid(grid.T, 2 * grid.N_star, 2 * grid.J_star, grid.d)
        sub = cell_means(g, fine, degree + 2).reshape((grid.N_star, 2) + (grid.J_star, 2) * grid.d)
        axes = (1,) + tuple(3 + 2 * i for i in range(grid.d))
        integrals = sub.sum(axis=axes).reshape(grid.shape) * fine.cell_volume
    else:
        integrals = np.asarray(g, dtype=float) * grid.cell_volume
    right = float(np.sum(r.R / grid.cell_volume * integrals))
    return left, right


def ito_pair_check(r: NoiseRealization, g: CellFunction | np.ndarray, degree: int = 12) -> float:
    """Residual left minus right of the projection/white-noise pairing identity."""
    left, right = ito_pair_sides(r, g, degree)
    return left - right


def noise_spectral_coeffs(r: NoiseRealization, cutoff: SpectralCutoff) -> np.ndarray:
    """Coefficients ``(W_hat(t), eps_alpha)`` on each time cell, shape ``(N_star, cutoff.size)``."""
    grid = r.grid
    if cutoff.d != grid.d:
        raise ValueError("cutoff and noise grid dimensions differ")
    B = cell_integrals_1d(cutoff.n_max, grid.J_star)
    return contract_cells(r.values, B, grid.d)


def contract_cells(cell_values: np.ndarray, B: np.ndarray, d: int) -> np.ndarray:
    """Apply the tensor matrix ``B x ... x B`` to each row of ``cell_values``.

    ``cell_values`` has shape ``(batch, J^d)``; ``B`` maps ``J -> m`` per dimension; the result
    has shape ``(batch, m^d)``.
    """
    m, J = B.shape
    v = np.asarray(cell_values, dtype=float)
    batch = v.shape[0]
    v = v.reshape((batch,) + (J,) * d)
    for axis in range(1, d + 1):
        v = np.moveaxis(np.tensordot(v, B, axes=([axis], [1])), -1, axis)
    return v.reshape(batch, m**d)
