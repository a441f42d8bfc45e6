"""Globalized inexact Gauss-Newton-Krylov solver.

Outer loop: at ``v_k`` compute ``g_k``, stop when the gradient is small,
otherwise solve ``H ṽ = -g`` approximately with PCG to the relative tolerance
``eps_H = min(0.5, sqrt(||g_k|| / ||g_0||))`` and take the Armijo step
``v_{k+1} = v_k + alpha ṽ``. ``g_0`` is the gradient at ``v = 0``.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .fields import norm_l2
from .objective import EvalState, RegistrationProblem, evaluate_objective, hessian_matvec, reduced_gradient
from .precond import (
    apply_spectral_precond,
    apply_twolevel_precond,
    build_twolevel_context,
    split_system_matvec,
)

__all__ = [
    "SolverParams",
    "IterationRecord",
    "SolveReport",
    "PCGStats",
    "LineSearchError",
    "compute_forcing",
    "pcg_solve",
    "armijo_search",
    "newton_step",
    "gauss_newton_solve",
    "REPORT_COLUMNS",
]

log = logging.getLogger("veloreg")


class LineSearchError(RuntimeError):
    """No step length satisfied the Armijo condition."""


@dataclass(frozen=True)
class SolverParams:
    """Outer and inner iteration controls."""

    eps_opt: float = 5e-2
    abs_grad_tol: float = 1e-6
    max_newton: int = 50
    max_krylov: int = 100
    c1: float = 1e-4
    backtrack: float = 0.5
    max_trials: int = 20
    tol_mode: str = "squared"

    def __post_init__(self):
        if not (self.eps_opt > 0 and self.abs_grad_tol > 0 and 0 < self.c1 < 1 and 0 < self.backtrack < 1):
            raise ValueError("tolerances must be positive and factors in (0, 1)")
        if self.max_newton < 1 or self.max_krylov < 1 or self.max_trials < 1:
            raise ValueError("iteration limits must be >= 1")
        if self.tol_mode not in ("squared", "norm"):
            raise ValueError("tol_mode must be 'squared' or 'norm'")

    @classmethod
    def from_config(cls, cfg) -> "SolverParams":
        return cls(eps_opt=cfg.eps_g, abs_grad_tol=cfg.abs_grad_tol, max_newton=cfg.max_newton,
                   max_krylov=cfg.max_krylov, tol_mode=cfg.tol_mode)


REPORT_COLUMNS = (
    "k",
    "objective",
    "mismatch",
    "grad_norm",
    "grad_rel",
    "alpha",
    "inner_iters",
    "matvec_fine",
    "matvec_coarse",
    "pde_solves",
    "wall_time",
)


@dataclass
class IterationRecord:
    """One row of the solve report (counters are cumulative)."""

    k: int
    objective: float
    mismatch: float
    grad_norm: float
    grad_rel: float
    alpha: float
    inner_iters: int
    matvec_fine: int
    matvec_coarse: int
    pde_solves: int
    wall_time: float


@dataclass
class SolveReport:
    """Per-iteration telemetry plus the termination reason.

    ``reason`` is one of ``"relative_gradient"``, ``"absolute_gradient"``,
    ``"max_newton"`` or ``"line_search_failed"``.
    """

    records: list = field(default_factory=list)
    reason: str = ""
    line_search_failed: bool = False
    g0_norm: float = float("nan")
    beta_v: float = float("nan")

    @property
    def iterations(self) -> int:
        return self.records[-1].k if self.records else 0

    @property
    def final(self) -> IterationRecord:
        return self.records[-1]

    @property
    def total_inner(self) -> int:
        return sum(r.inner_iters for r in self.records)

    def to_csv(self, header: str | None = None) -> str:
        buf = io.StringIO()
        if header:
            for line in header.splitlines():
                buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in self.records:
            d = asdict(r)
            w.writerow([repr(d[c]) if isinstance(d[c], float) else d[c] for c in REPORT_COLUMNS])
        return buf.getvalue()


def compute_forcing(g_norm: float, g0_norm: float) -> float:
    """Superlinear forcing ``eps_H = min(0.5, sqrt(||g_k|| / ||g_0||))``."""
    if not g0_norm > 0:
        raise ValueError("||g_0|| must be positive; the solver should already have stopped")
    return min(0.5, float(np.sqrt(g_norm / g0_norm)))


@dataclass
class PCGStats:
    iterations: int = 0
    converged: bool = False
    negative_curvature: bool = False
    rel_residual: float = 0.0
    max_iterations_hit: bool = False


def _dot(a, b) -> float:
    return float(np.dot(a.ravel().astype(np.float64, copy=False), b.ravel().astype(np.float64, copy=False)))


def pcg_solve(matvec, rhs: np.ndarray, eps_H: float, precond=None, max_krylov: int = 100):
    """Preconditioned conjugate gradients from a zero initial guess.

    Stops when ``||r|| < eps_H * ||rhs||``. On non-positive curvature the
    current iterate is returned (or the preconditioned rhs if still zero)
    with ``negative_curvature`` set.

    Returns
    -------
    x : ndarray
    stats : PCGStats
    """
    stats = PCGStats()
    x = np.zeros_like(rhs)
    r = rhs.copy()
    r0 = np.sqrt(_dot(r, r))
    if r0 == 0.0:
        stats.converged = True
        return x, stats
    z = precond(r) if precond is not None else r.copy()
    s = z.copy()
    rz = _dot(r, z)
    for i in range(1, max_krylov + 1):
        Hs = matvec(s)
        sHs = _dot(s, Hs)
        stats.iterations = i
        if sHs <= 0.0:
            stats.negative_curvature = True
            if i == 1:
                x = s
            break
        alpha = rz / sHs
        x += alpha * s
        r -= alpha * Hs
        rn = np.sqrt(_dot(r, r))
        stats.rel_residual = rn / r0
        if rn < eps_H * r0:
            stats.converged = True
            break
        z = precond(r) if precond is not None else r.copy()
        rz_new = _dot(r, z)
        s = z + (rz_new / rz) * s
        rz = rz_new
    else:
        stats.max_iterations_hit = True
    return x, stats


def armijo_search(state: EvalState, direction: np.ndarray, g: np.ndarray, c1: float = 1e-4,
                  backtrack: float = 0.5, max_trials: int = 20):
    """Backtracking line search along a descent direction.

    Returns ``(alpha, new_state)`` for the first ``alpha`` in ``1, 1/2, ...``
    with ``J(v + alpha d) <= J(v) + c1 alpha <g, d>``.

    Raises
    ------
    ValueError
        If ``direction`` is not a descent direction.
    LineSearchError
        If no step is accepted within ``max_trials``.
    """
    slope = _dot(g, direction) * state.problem.grid.cell_volume
    if not slope < 0:
        raise ValueError(f"not a descent direction: <g, d> = {slope:.3e}")
    alpha = 1.0
    for _ in range(max_trials):
        trial = evaluate_objective(state.problem, state.v + alpha * direction)
        if trial.value <= state.value + c1 * alpha * slope:
            return alpha, trial
        alpha *= backtrack
    raise LineSearchError(f"Armijo condition not met after {max_trials} trials")


def newton_step(state: EvalState, eps_H: float, max_krylov: int = 100):
    """Approximate Newton step ``H ṽ = -g`` with the configured preconditioner.

    Returns ``(vt, stats)``.
    """
    problem = state.problem
    cfg = problem.config
    g = reduced_gradient(state)
    if cfg.precond == "spectral":
        def M(r):
            return problem.project(apply_spectral_precond(r, cfg.norm, cfg.beta_v, "full_inverse"))
        return pcg_solve(lambda u: hessian_matvec(state, u), -g, eps_H, M, max_krylov)
    ctx = build_twolevel_context(state)
    try:
        rhs = -apply_spectral_precond(g, cfg.norm, cfg.beta_v, "split")
        w, stats = pcg_solve(lambda u: split_system_matvec(state, u), rhs, eps_H,
                             lambda s: apply_twolevel_precond(ctx, s, eps_H), max_krylov)
    finally:
        ctx.invalidate()
    return problem.project(apply_spectral_precond(w, cfg.norm, cfg.beta_v, "split")), stats


def _converged(g_norm, g0_norm, params: SolverParams):
    if g_norm <= params.abs_grad_tol:
        return "absolute_gradient"
    if params.tol_mode == "squared":
        ok = g_norm**2 <= params.eps_opt * g0_norm**2
    else:
        ok = g_norm <= params.eps_opt * g0_norm
    return "relative_gradient" if ok else None


def gauss_newton_solve(problem: RegistrationProblem, v0: np.ndarray | None = None,
                       params: SolverParams | None = None, g0_norm: float | None = None,
                       callback=None):
    """Minimize the registration objective from ``v0`` (default zero).

    Parameters
    ----------
    problem : RegistrationProblem
        Images, configuration (norm, ``beta_v``, preconditioner) and counters.
    v0 : ndarray, optional
        Initial velocity (warm start).
    params : SolverParams, optional
        Defaults from the problem configuration.
    g0_norm : float, optional
        Reference gradient norm; computed at ``v = 0`` when omitted.
    callback : callable, optional
        Called with each :class:`IterationRecord`.

    Returns
    -------
    v : ndarray
    report : SolveReport
    """
    params = params or SolverParams.from_config(problem.config)
    counters = problem.counters
    t0 = time.perf_counter()
    report = SolveReport(beta_v=problem.config.beta_v)
    v = problem.zero_velocity() if v0 is None else problem.project(np.asarray(v0, dtype=problem.dtype))
    state = evaluate_objective(problem, v)
    g = reduced_gradient(state)
    gn = norm_l2(g)
    if g0_norm is None:
        if np.any(v):
            g0_norm = norm_l2(reduced_gradient(evaluate_objective(problem, problem.zero_velocity())))
        else:
            g0_norm = gn
    report.g0_norm = g0_norm

    def record(k, alpha, inner):
        rec = IterationRecord(
            k=k, objective=state.value, mismatch=state.mismatch, grad_norm=gn,
            grad_rel=gn / g0_norm if g0_norm > 0 else 0.0, alpha=alpha, inner_iters=inner,
            matvec_fine=counters.matvecs["fine"], matvec_coarse=counters.matvecs["coarse"],
            pde_solves=counters.pde_solves["fine"] + counters.pde_solves["coarse"],
            wall_time=time.perf_counter() - t0,
        )
        report.records.append(rec)
        log.info("k=%d J=%.6e mismatch=%.4e |g|rel=%.3e alpha=%.3g inner=%d", k, rec.objective,
                 rec.mismatch, rec.grad_rel, alpha, inner)
        if callback is not None:
            callback(rec)

    record(0, 0.0, 0)
    k = 0
    while True:
        if g0_norm == 0.0:
            report.reason = "absolute_gradient"
            break
        reason = _converged(gn, g0_norm, params)
        if reason:
            report.reason = reason
            break
        if k >= params.max_newton:
            report.reason = "max_newton"
            break
        eps_H = compute_forcing(gn, g0_norm)
        vt, stats = newton_step(state, eps_H, params.max_krylov)
        try:
            alpha, new_state = armijo_search(state, vt, g, params.c1, params.backtrack, params.max_trials)
        except (LineSearchError, ValueError) as exc:
            log.warning("line search failed: %s", exc)
            report.reason = "line_search_failed"
            report.line_search_failed = True
            break
        state = new_state
        g = reduced_gradient(state)
        gn = norm_l2(g)
        k += 1
        record(k, alpha, stats.iterations)
    return state.v, report
