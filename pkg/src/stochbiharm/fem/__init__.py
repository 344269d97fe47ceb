"""C1 tensor-product spline Galerkin discretization of the biharmonic operator."""
from .basis import BSplineBasis1D
from .schemes import (
    be_steps,
    deterministic_fd_path,
    fully_discrete_path,
    noise_step_loads,
    semidiscrete_homogeneous,
    semidiscrete_noise_path,
)
from .space import (
    DiscreteEigenpairs,
    DofLimitError,
    FemFunction,
    FemSpace,
    SolverError,
    assemble,
    discrete_eigenpairs,
    export_matrix,
    fem_vs_spectral_error,
    l2_project,
    solve_biharmonic,
)

__all__ = [
    "BSplineBasis1D", "DiscreteEigenpairs", "DofLimitError", "FemFunction", "FemSpace",
    "SolverError", "assemble", "be_steps", "deterministic_fd_path", "discrete_eigenpairs",
    "export_matrix", "fem_vs_spectral_error", "fully_discrete_path", "l2_project",
    "noise_step_loads", "semidiscrete_homogeneous", "semidiscrete_noise_path", "solve_biharmonic",
]
