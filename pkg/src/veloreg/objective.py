"""Objective, reduced gradient and Hessian matvec of the registration problem.

The objective is::

    J(v) = 1/2 ||m(1) - m_R||^2 + beta_v/2 <A v, v> + beta_w/2 int |grad w|^2 + w^2

with ``w = div v`` (divergence penalty only when enabled) and ``m`` the
transported template. With the incompressible constraint ``v`` lives in the
divergence-free subspace and gradient and Hessian are Leray-projected.

The gradient returned is the L2 gradient of the discrete objective,
``g = H_reg v + g_data`` with ``H_reg = beta_v A + beta_w P``. The data part
is accumulated during the backward adjoint sweep as
``g_data = -(dX)^T sum_j lam_{j+1} G_j`` where ``G_j`` is the gradient of the
interpolated state at the departure points (see :mod:`veloreg.transport`);
no adjoint history is stored.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import transport as tr
from .config import RegConfig
from .fields import (
    apply_projection_K,
    apply_reg_hessian,
    check_same_grid,
    divergence,
    gradient,
    inner_product,
)

__all__ = [
    "Counters",
    "RegistrationProblem",
    "EvalState",
    "evaluate_objective",
    "reduced_gradient",
    "hessian_matvec",
    "data_hessian_matvec",
]


@dataclass
class Counters:
    """Work counters, split by grid level.

    ``pde_solves`` counts transport solves (state, adjoint, incremental
    state, incremental adjoint). ``matvecs`` counts Hessian applications.
    """

    pde_solves: dict = field(default_factory=lambda: {"fine": 0, "coarse": 0})
    matvecs: dict = field(default_factory=lambda: {"fine": 0, "coarse": 0})
    objective_evals: int = 0
    gradient_evals: int = 0
    lanczos_runs: int = 0

    def snapshot(self) -> dict:
        return {
            "pde_fine": self.pde_solves["fine"],
            "pde_coarse": self.pde_solves["coarse"],
            "matvec_fine": self.matvecs["fine"],
            "matvec_coarse": self.matvecs["coarse"],
            "objective_evals": self.objective_evals,
            "gradient_evals": self.gradient_evals,
            "lanczos_runs": self.lanczos_runs,
        }


class RegistrationProblem:
    """Reference and template images plus the configuration.

    Images are cast to the configured precision. ``level`` selects which
    counters ("fine" or "coarse") this problem charges its work to.
    """

    def __init__(self, m_R: np.ndarray, m_T: np.ndarray, config: RegConfig,
                 counters: Counters | None = None, level: str = "fine"):
        grid = check_same_grid(m_R, m_T)
        if m_R.ndim != 3:
            raise ValueError("images must be scalar fields")
        if config.beta_v is None:
            raise ValueError("config.beta_v must be set before building a problem")
        if level not in ("fine", "coarse"):
            raise ValueError("level must be 'fine' or 'coarse'")
        dtype = config.dtype
        self.grid = grid
        self.m_R = np.ascontiguousarray(m_R, dtype=dtype)
        self.m_T = np.ascontiguousarray(m_T, dtype=dtype)
        self.config = config
        self.counters = counters if counters is not None else Counters()
        self.level = level
        diff = self.m_T - self.m_R
        self.initial_mismatch = inner_product(diff, diff)

    @property
    def dtype(self):
        return self.config.dtype

    def with_config(self, config: RegConfig) -> "RegistrationProblem":
        """Same images and counters under another configuration."""
        return RegistrationProblem(self.m_R, self.m_T, config, self.counters, self.level)

    def project(self, f: np.ndarray) -> np.ndarray:
        """Apply the constraint projection (Leray when incompressible)."""
        if self.config.incompressible:
            return apply_projection_K(f, "incompressible")
        return f

    def reg_apply(self, v: np.ndarray) -> np.ndarray:
        return apply_reg_hessian(v, self.config.norm, self.config.beta_v, 1.0)

    def zero_velocity(self) -> np.ndarray:
        return np.zeros(self.grid.vector_shape, dtype=self.dtype)


@dataclass
class EvalState:
    """Everything derived from one velocity: characteristics, state history,
    objective terms, and (lazily) the gradient."""

    problem: RegistrationProblem
    v: np.ndarray
    chars: tr.Characteristics
    m_history: np.ndarray
    value: float
    data_term: float
    reg_term: float
    mismatch: float
    grads: np.ndarray | None = None
    gradient: np.ndarray | None = None
    lam_history: np.ndarray | None = None

    @property
    def config(self) -> RegConfig:
        return self.problem.config


def _check_finite(f: np.ndarray, what: str):
    if not np.all(np.isfinite(f)):
        raise FloatingPointError(f"{what} contains non-finite values")


def evaluate_objective(problem: RegistrationProblem, v: np.ndarray) -> EvalState:
    """Solve the state equation for ``v`` and evaluate the objective.

    Costs one PDE solve. The returned state caches the characteristics and
    the state history for the gradient and Hessian.
    """
    _check_finite(v, "velocity")
    if v.shape != problem.grid.vector_shape:
        raise ValueError(f"velocity shape {v.shape} does not match {problem.grid.vector_shape}")
    cfg = problem.config
    v = np.ascontiguousarray(v, dtype=problem.dtype)
    chars = tr.trace_characteristics(v, cfg.n_t)
    grads = None
    if cfg.cache_state_gradients:
        hist, grads = tr.solve_state_with_gradients(problem.m_T, chars)
    else:
        hist = tr.solve_state(problem.m_T, chars)
    problem.counters.pde_solves[problem.level] += 1
    problem.counters.objective_evals += 1
    res = hist[-1] - problem.m_R
    data = 0.5 * inner_product(res, res)
    reg = 0.5 * inner_product(problem.reg_apply(v), v)
    rel = 2.0 * data / problem.initial_mismatch if problem.initial_mismatch > 0 else 0.0
    return EvalState(problem, v, chars, hist, data + reg, data, reg, rel, grads)


def _state_grad(state: EvalState, j: int) -> np.ndarray:
    if state.grads is not None:
        return state.grads[j]
    return tr.state_gradients(state.m_history, state.chars, j)


def reduced_gradient(state: EvalState, keep_adjoint: bool | None = None) -> np.ndarray:
    """Reduced gradient at ``state.v``; costs one (adjoint) PDE solve.

    The adjoint ``lam`` is swept backward from ``m_R - m(1)`` and the data
    term accumulated on the fly. For full-Newton runs the adjoint history is
    kept for the Hessian (or when ``keep_adjoint`` is set). The result is
    cached on the state.
    """
    problem, chars = state.problem, state.chars
    keep = not problem.config.gauss_newton if keep_adjoint is None else keep_adjoint
    if state.gradient is not None and (state.lam_history is not None or not keep):
        return state.gradient
    nt = chars.n_t
    lam = problem.m_R - state.m_history[-1]
    if keep:
        lam_hist = np.empty_like(state.m_history)
        lam_hist[nt] = lam
    q = np.zeros((3, problem.grid.size), dtype=problem.dtype)
    for j in range(nt - 1, -1, -1):
        q += lam.reshape(1, -1) * _state_grad(state, j)
        if j > 0 or keep:
            lam = tr.adjoint_step(lam, chars)
            if keep:
                lam_hist[j] = lam
    problem.counters.pde_solves[problem.level] += 1
    problem.counters.gradient_evals += 1
    g = problem.reg_apply(state.v) + tr.departure_variation_transpose(chars, q)
    g = problem.project(g)
    state.gradient = g
    if keep:
        state.lam_history = lam_hist
    return g


def data_hessian_matvec(state: EvalState, vt: np.ndarray, gauss_newton: bool | None = None) -> np.ndarray:
    """Data part ``K H_data K vt`` of the Hessian; two PDE solves.

    Gauss-Newton mode is ``J^T J`` with ``J`` the derivative of ``m(1)`` with
    respect to ``v``, so it is symmetric positive semidefinite to rounding.
    Full-Newton mode adds the adjoint-dependent terms (the ``div(lam vt)``
    source of the incremental adjoint and ``int lam grad mt dt``).
    """
    _check_finite(vt, "Hessian probe")
    problem, chars = state.problem, state.chars
    gn = problem.config.gauss_newton if gauss_newton is None else gauss_newton
    if not gn and state.lam_history is None:
        state.gradient = None
        reduced_gradient(state, keep_adjoint=True)
    vt = problem.project(np.ascontiguousarray(vt, dtype=problem.dtype))
    nt, dt = chars.n_t, chars.dt
    mt = tr.solve_inc_state(state.m_history, chars, vt, grads=state.grads)
    lt = -mt[-1]
    q = np.zeros((3, problem.grid.size), dtype=problem.dtype)
    if not gn:
        src = [divergence(state.lam_history[j][None] * vt) for j in range(nt + 1)]
    for j in range(nt - 1, -1, -1):
        q += lt.reshape(1, -1) * _state_grad(state, j)
        if j > 0:
            if gn:
                lt = tr.adjoint_step(lt, chars)
            else:
                lt = tr.adjoint_step(lt + 0.5 * dt * src[j + 1], chars) + 0.5 * dt * src[j]
    out = tr.departure_variation_transpose(chars, q)
    if not gn:
        for j in range(1, nt + 1):
            w = 0.5 * dt if j == nt else dt
            out += w * state.lam_history[j][None] * gradient(mt[j])
    problem.counters.pde_solves[problem.level] += 2
    problem.counters.matvecs[problem.level] += 1
    return problem.project(out)


def hessian_matvec(state: EvalState, vt: np.ndarray, gauss_newton: bool | None = None) -> np.ndarray:
    """Reduced Hessian action ``H vt = H_reg vt + K H_data vt``."""
    problem = state.problem
    vt = problem.project(np.ascontiguousarray(vt, dtype=problem.dtype))
    return problem.reg_apply(vt) + data_hessian_matvec(state, vt, gauss_newton)
