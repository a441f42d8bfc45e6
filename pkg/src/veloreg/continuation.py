"""Continuation schemes and the search for the regularization weight.

* parameter continuation: solve for ``beta_v = 1, 1e-1, ...`` down to the
  target, warm-starting each level;
* grid continuation: coarse-to-fine solves with spectral prolongation of
  the velocity;
* scale continuation: fixed grid, images smoothed from the originals with a
  decreasing Gaussian width;
* beta search: the smallest ``beta_v`` whose map keeps ``det grad y`` inside
  ``[eps_J, 1 / eps_J]``.

All levels measure the gradient tolerance against the gradient at ``v = 0``,
which does not depend on ``beta_v``.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .fields import Grid3, gaussian_smooth, norm_l2, spectral_resample
from .objective import RegistrationProblem, evaluate_objective, reduced_gradient
from .postprocess import det_deformation_gradient
from .solver import SolveReport, gauss_newton_solve

__all__ = [
    "ContinuationPlan",
    "BetaSearchParams",
    "LevelResult",
    "ContinuationError",
    "BetaSearchError",
    "beta_schedule",
    "run_parameter_continuation",
    "run_grid_continuation",
    "run_scale_continuation",
    "search_beta",
    "run_plan",
]

log = logging.getLogger("veloreg")


class ContinuationError(RuntimeError):
    """A level failed; ``levels`` holds the results obtained so far."""

    def __init__(self, message, levels):
        super().__init__(message)
        self.levels = levels


class BetaSearchError(RuntimeError):
    """No feasible ``beta_v`` in the bracket; ``trace`` holds all trials."""

    def __init__(self, message, trace):
        super().__init__(message)
        self.trace = trace


def beta_schedule(target: float, start: float = 1.0) -> list[float]:
    """Decades from ``start`` down to ``target``; the last entry is ``target``."""
    if not 0 < target <= start:
        raise ValueError("target beta_v must lie in (0, start]")
    out = []
    i = 0
    while True:
        b = start * 10.0 ** (-i)
        if b <= target * (1 + 1e-9):
            break
        out.append(b)
        i += 1
    out.append(target)
    return out


@dataclass
class ContinuationPlan:
    """Which continuation to run and its levels."""

    scheme: str = "none"
    beta_target: float | None = None
    grid_levels: int = 2
    sigmas: tuple = (4.0, 2.0, 1.0)

    def __post_init__(self):
        if self.scheme not in ("none", "parameter", "grid", "scale"):
            raise ValueError(f"unknown continuation {self.scheme!r}")
        if any(self.sigmas[i + 1] >= self.sigmas[i] for i in range(len(self.sigmas) - 1)):
            raise ValueError("sigmas must be strictly decreasing")
        if self.grid_levels < 1:
            raise ValueError("grid_levels must be >= 1")

    @property
    def beta_levels(self) -> list[float]:
        return beta_schedule(self.beta_target)


@dataclass
class LevelResult:
    beta_v: float
    dims: tuple
    sigma: float | None
    report: SolveReport
    entry_objective: float


@dataclass(frozen=True)
class BetaSearchParams:
    """Bounds ``eps_J <= det grad y <= 1 / eps_J`` and the search bracket."""

    eps_J: float = 0.25
    beta_lo: float = 1e-5
    beta_hi: float = 1.0
    max_bisections: int = 10
    resolution: float = 0.25

    def __post_init__(self):
        if not 0 < self.eps_J < 1:
            raise ValueError("eps_J must lie in (0, 1)")
        if not 0 < self.beta_lo < self.beta_hi:
            raise ValueError("bracket must satisfy 0 < beta_lo < beta_hi")


def _g0(problem: RegistrationProblem) -> float:
    return norm_l2(reduced_gradient(evaluate_objective(problem, problem.zero_velocity())))


def _solve_level(problem, v0, g0, levels, sigma=None):
    entry = evaluate_objective(problem, problem.zero_velocity() if v0 is None else v0).value
    v, rep = gauss_newton_solve(problem, v0, g0_norm=g0)
    levels.append(LevelResult(problem.config.beta_v, problem.grid.dims, sigma, rep, entry))
    if rep.line_search_failed:
        raise ContinuationError(f"line search failed at beta_v={problem.config.beta_v:g}", levels)
    return v


def run_parameter_continuation(problem: RegistrationProblem, beta_target: float | None = None,
                               v0: np.ndarray | None = None):
    """Solve along ``beta_v = 1, 1e-1, ..., beta_target`` with warm starts.

    Returns ``(v, levels)``; raises :class:`ContinuationError` if a level's
    line search fails.
    """
    beta_target = problem.config.beta_v if beta_target is None else beta_target
    g0 = _g0(problem)
    levels: list[LevelResult] = []
    v = v0
    for beta in beta_schedule(beta_target):
        level = problem.with_config(problem.config.replace(beta_v=beta))
        v = _solve_level(level, v, g0, levels)
    return v, levels


def _grid_hierarchy(grid: Grid3, n_levels: int, coarsest: int = 16) -> list[Grid3]:
    grids = [grid]
    while len(grids) < n_levels:
        g = grids[-1]
        if any(n % 2 or n // 2 < coarsest for n in g.dims):
            break
        grids.append(g.coarsen(2))
    return grids[::-1]


def run_grid_continuation(problem: RegistrationProblem, levels=2, v0: np.ndarray | None = None):
    """Coarse-to-fine solves; ``levels`` is a count or a list of grids.

    Coarse images are spectrally restricted from the problem's images and
    smoothed with one voxel of the coarse grid; the finest level uses the
    problem's images unchanged. The velocity is prolonged spectrally.
    """
    grids = _grid_hierarchy(problem.grid, levels) if isinstance(levels, int) else list(levels)
    if grids[-1].dims != problem.grid.dims:
        raise ValueError("the finest level must be the problem grid")
    results: list[LevelResult] = []
    v = v0
    for i, grid in enumerate(grids):
        if grid.dims == problem.grid.dims:
            level = problem
        else:
            mR = gaussian_smooth(spectral_resample(problem.m_R, grid), 1.0)
            mT = gaussian_smooth(spectral_resample(problem.m_T, grid), 1.0)
            level = RegistrationProblem(mR, mT, problem.config, problem.counters, problem.level)
        if v is not None:
            v = level.project(spectral_resample(v, grid))
        v = _solve_level(level, v, _g0(level), results, sigma=None if i == len(grids) - 1 else 1.0)
    return v, results


def run_scale_continuation(problem: RegistrationProblem, sigmas=(4.0, 2.0, 1.0), v0: np.ndarray | None = None):
    """Fixed-grid solves on images smoothed from the originals.

    The problem's images are treated as the originals; level ``l`` uses
    ``gaussian_smooth(original, sigmas[l])``.
    """
    sigmas = tuple(float(s) for s in sigmas)
    if any(sigmas[i + 1] >= sigmas[i] for i in range(len(sigmas) - 1)):
        raise ValueError("sigmas must be strictly decreasing")
    results: list[LevelResult] = []
    v = v0
    for sigma in sigmas:
        level = RegistrationProblem(gaussian_smooth(problem.m_R, sigma), gaussian_smooth(problem.m_T, sigma),
                                    problem.config, problem.counters, problem.level)
        v = _solve_level(level, v, _g0(level), results, sigma=sigma)
    return v, results


@dataclass
class BetaTrial:
    beta_v: float
    feasible: bool
    det_min: float
    det_max: float
    iterations: int


@dataclass
class BetaSearchResult:
    beta_v: float
    v: np.ndarray
    trace: list = field(default_factory=list)


def _feasible(det_min, det_max, eps_J):
    return bool(det_min >= eps_J and det_max <= 1.0 / eps_J)


def _severity(t: BetaTrial, eps_J: float) -> float:
    if not t.det_min > 0:
        return math.inf
    return max(eps_J / t.det_min, eps_J * t.det_max)


def search_beta(problem: RegistrationProblem, params: BetaSearchParams | None = None) -> BetaSearchResult:
    """Smallest ``beta_v`` whose solution keeps ``det grad y`` within bounds.

    Starting at the upper end of the bracket, ``beta_v`` is lowered a decade
    at a time (each solve warm-started from the last feasible velocity)
    until a trial is infeasible or the lower end is reached. The bracket
    between the last feasible and the first infeasible value is then
    bisected on ``log10(beta_v)`` until it is at most ``params.resolution``
    decades wide or ``params.max_bisections`` is used up.

    Bisection assumes the bound violation shrinks as ``beta_v`` grows. The
    trace is checked for this: a warning is issued if a larger ``beta_v``
    violates the bounds by more than a smaller one (severity
    ``max(eps_J / det_min, eps_J * det_max)``, feasible iff at most one).

    Raises
    ------
    BetaSearchError
        If even the largest ``beta_v`` violates the bounds.
    """
    params = params or BetaSearchParams(eps_J=problem.config.jbound)
    g0 = _g0(problem)
    trace: list[BetaTrial] = []

    def trial(beta, v_start):
        level = problem.with_config(problem.config.replace(beta_v=beta))
        v, rep = gauss_newton_solve(level, v_start, g0_norm=g0)
        J = det_deformation_gradient(v, problem.config.n_t)
        lo, hi = float(J.min()), float(J.max())
        ok = _feasible(lo, hi, params.eps_J) and not rep.line_search_failed
        trace.append(BetaTrial(beta, ok, lo, hi, rep.iterations))
        log.info("beta search: beta_v=%.4e det in [%.3f, %.3f] feasible=%s", beta, lo, hi, ok)
        return ok, v

    ok, v = trial(params.beta_hi, None)
    if not ok:
        raise BetaSearchError(f"no feasible beta_v in [{params.beta_lo:g}, {params.beta_hi:g}]", trace)
    best_beta, best_v = params.beta_hi, v
    infeasible = None
    n_decades = math.ceil(math.log10(params.beta_hi / params.beta_lo) - 1e-9)
    for i in range(1, n_decades + 1):
        beta = max(params.beta_hi * 10.0 ** (-i), params.beta_lo)
        ok, v = trial(beta, best_v)
        if not ok:
            infeasible = beta
            break
        best_beta, best_v = beta, v
    if infeasible is not None:
        for _ in range(params.max_bisections):
            if math.log10(best_beta / infeasible) <= params.resolution + 1e-9:
                break
            mid = math.sqrt(best_beta * infeasible)
            ok, v = trial(mid, best_v)
            if ok:
                best_beta, best_v = mid, v
            else:
                infeasible = mid
    ordered = sorted(trace, key=lambda t: t.beta_v)
    for a, b in zip(ordered, ordered[1:]):
        if _severity(b, params.eps_J) > _severity(a, params.eps_J) * (1 + 1e-3):
            warnings.warn(f"feasibility not monotone in beta_v: the bound violation at {b.beta_v:.3e} exceeds "
                          f"the one at {a.beta_v:.3e}", RuntimeWarning, stacklevel=2)
    return BetaSearchResult(best_beta, best_v, trace)


def run_plan(problem: RegistrationProblem, plan: ContinuationPlan, v0=None):
    """Dispatch a :class:`ContinuationPlan`; returns ``(v, levels)``."""
    if plan.scheme == "parameter":
        return run_parameter_continuation(problem, plan.beta_target or problem.config.beta_v, v0)
    if plan.scheme == "grid":
        return run_grid_continuation(problem, plan.grid_levels, v0)
    if plan.scheme == "scale":
        return run_scale_continuation(problem, plan.sigmas, v0)
    levels: list[LevelResult] = []
    v = _solve_level(problem, v0, None, levels)
    return v, levels
