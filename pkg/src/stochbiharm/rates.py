"""Log-log rate fitting and theoretical convergence exponents."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EXACT_SLACK = 0.15
MC_SLACK = 0.3


def nu(r: int, d: int) -> float:
    """Spatial exponent of the stochastic schemes: ``(4-d)/3`` for ``r=2``, ``(4-d)/2`` for ``r=3, 4``."""
    if r == 2:
        return (4 - d) / 3
    if r in (3, 4):
        return (4 - d) / 2
    raise ValueError(f"r must be 2, 3 or 4, got {r}")


def nu_tilde(r: int, theta: float) -> float:
    """Deterministic parabolic FEM exponent: ``2, 4, 5`` times ``theta`` for ``r = 2, 3, 4``."""
    return {2: 2.0, 3: 4.0, 4: 5.0}[r] * theta


def xi_tilde(r: int, theta: float) -> float:
    """Initial-data regularity index paired with :func:`nu_tilde`."""
    return {2: 3.0, 3: 4.0, 4: 5.0}[r] * theta - 2.0


@dataclass
class ConvergenceStudy:
    """Errors measured at a list of resolutions of one parameter."""

    parameter: str
    resolutions: np.ndarray
    errors: np.ndarray
    fixed: dict = field(default_factory=dict)
    ci_low: np.ndarray | None = None
    ci_high: np.ndarray | None = None

    def __post_init__(self):
        self.resolutions = np.asarray(self.resolutions, dtype=float)
        self.errors = np.asarray(self.errors, dtype=float)
        if self.resolutions.shape != self.errors.shape or self.resolutions.ndim != 1:
            raise ValueError("resolutions and errors must be 1-D arrays of equal length")
        if self.resolutions.size < 3:
            raise ValueError("a convergence study needs at least 3 resolutions")
        if np.any(self.errors <= 0) or np.any(self.resolutions <= 0):
            raise ValueError("errors and resolutions must be positive")


@dataclass
class RateReport:
    slope: float
    intercept: float
    residual: float
    loo_slopes: np.ndarray
    theory: float | None = None
    slack: float = EXACT_SLACK
    excluded_coarsest: bool = False
    band: tuple[float, float] | None = None

    @property
    def passed(self) -> bool:
        if self.band is not None:
            return self.band[0] <= self.slope <= self.band[1]
        if self.theory is None:
            return True
        return self.slope >= self.theory - self.slack

    def summary(self) -> str:
        target = (f"in [{self.band[0]:.3g}, {self.band[1]:.3g}]" if self.band is not None
                  else f">= {self.theory:.3g} - {self.slack:.3g}")
        note = " (coarsest excluded)" if self.excluded_coarsest else ""
        return f"slope {self.slope:.4f} {target}{note}: {'PASS' if self.passed else 'FAIL'}"


def _lsq(x: np.ndarray, y: np.ndarray):
    A = np.vstack([x, np.ones_like(x)]).T
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    resid = float(np.sqrt(np.mean((A @ coef - y) ** 2)))
    return float(coef[0]), float(coef[1]), resid


def fit_rate(study: ConvergenceStudy, theory: float | None = None, slack: float = EXACT_SLACK,
             band: tuple[float, float] | None = None, guard: bool = True) -> RateReport:
    """Least-squares slope of ``log(error)`` against ``log(resolution)``.

    With ``guard=True`` and at least four points, the coarsest resolution is dropped when
    leaving it out moves the slope by more than 0.1.
    """
    x = np.log(study.resolutions)
    y = np.log(study.errors)
    slope, intercept, resid = _lsq(x, y)
    loo = np.array([_lsq(np.delete(x, i), np.delete(y, i))[0] for i in range(x.size)]) if x.size > 2 else np.array([])
    excluded = False
    if guard and x.size >= 4:
        coarsest = int(np.argmax(study.resolutions))
        if abs(loo[coarsest] - slope) > 0.1:
            keep = np.arange(x.size) != coarsest
            slope, intercept, resid = _lsq(x[keep], y[keep])
            excluded = True
    return RateReport(slope, intercept, resid, loo, theory, slack, excluded, band)
