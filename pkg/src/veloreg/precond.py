"""Preconditioners for the reduced Hessian.

Spectral preconditioner
    ``M = H_reg^{-1}`` with ``H_reg = beta_v A + beta_w P`` applied as a
    Fourier multiplier; zero singular values of ``A`` are replaced by one
    before inversion and then scaled by ``beta_v``.

Two-level preconditioner
    Works on the split system ``(I + H_reg^{-1/2} H_data H_reg^{-1/2}) w =
    -H_reg^{-1/2} g`` with ``vt = H_reg^{-1/2} w``. High frequencies are left
    alone (the split operator is close to the identity there); the low band
    is restricted to a grid of half resolution, solved approximately with the
    coarse split operator, and prolonged back::

        M s = F_L Q_P Sbar^{-1} Q_R F_L s + F_H s

    The coarse operator is discretized directly on the coarse grid from the
    restricted velocity and state history. The coarse solve uses nested CG
    to tolerance ``kappa * eps_H`` or a fixed number of Chebyshev steps with
    Lanczos eigenvalue bounds.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import eigh_tridiagonal

from . import transport as tr
from .config import RegConfig
from .fields import Grid3, RegNorm, apply_reg_hessian, frequency_filter, spectral_resample
from .objective import EvalState, RegistrationProblem, data_hessian_matvec

__all__ = [
    "apply_spectral_precond",
    "split_system_matvec",
    "TwoLevelContext",
    "build_twolevel_context",
    "coarse_hessian_matvec",
    "apply_twolevel_precond",
    "lanczos_bounds",
    "cheb_solve",
    "StaleContextError",
]


class StaleContextError(RuntimeError):
    """A two-level context was used after its velocity changed."""


def apply_spectral_precond(r: np.ndarray, norm: RegNorm, beta_v: float, mode: str = "full_inverse") -> np.ndarray:
    """``H_reg^{-1} r`` (``full_inverse``) or ``H_reg^{-1/2} r`` (``split``)."""
    if not beta_v > 0:
        raise ValueError("beta_v must be positive")
    power = {"full_inverse": -1.0, "split": -0.5}.get(mode)
    if power is None:
        raise ValueError(f"unknown mode {mode!r}")
    return apply_reg_hessian(r, norm, beta_v, power)


def _split(problem: RegistrationProblem, f: np.ndarray, power: float = -0.5) -> np.ndarray:
    cfg = problem.config
    return apply_reg_hessian(f, cfg.norm, cfg.beta_v, power)


def split_system_matvec(state: EvalState, w: np.ndarray, exact_zero_mode: bool = True) -> np.ndarray:
    """``(I + H_reg^{-1/2} H_data H_reg^{-1/2}) w``; one Hessian matvec.

    ``H_reg^{-1/2}`` maps the constants to ``beta_v^{-1/2}`` times themselves,
    so for seminorms ``H_reg^{-1/2} H_reg H_reg^{-1/2}`` is the identity
    minus the mean. With ``exact_zero_mode`` that product is used, and
    mapping the solution back with ``H_reg^{-1/2}`` solves the unsplit
    Newton system exactly. Otherwise the constants are regularized with
    ``beta_v`` (the convention of the spectral preconditioner); the coarse
    operator uses this variant so it stays definite.
    """
    problem = state.problem
    w = problem.project(w)
    out = w + _split(problem, data_hessian_matvec(state, _split(problem, w)))
    if exact_zero_mode and problem.config.norm.has_zero_mode:
        out -= w.mean(axis=(-3, -2, -1), keepdims=True)
    return out


def _dot(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.dot(a.ravel().astype(np.float64, copy=False), b.ravel().astype(np.float64, copy=False)))


def lanczos_bounds(matvec, shape, n_iter: int = 10, margin: float = 0.05, seed: int = 0,
                   dtype=np.float64) -> tuple[float, float]:
    """Extremal Ritz values of a symmetric operator with safety margins.

    Runs ``n_iter`` Lanczos steps (full reorthogonalization) from a random
    start vector and returns ``((1 - margin) * theta_min, (1 + margin) *
    theta_max)``. On breakdown the completed steps are used.
    """
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(shape).astype(dtype)
    q /= np.sqrt(_dot(q, q))
    basis = [q]
    alphas, betas = [], []
    for i in range(n_iter):
        w = matvec(basis[-1])
        alphas.append(_dot(w, basis[-1]))
        for b in basis:
            w = w - _dot(w, b) * b
        beta = np.sqrt(_dot(w, w))
        if i == n_iter - 1 or beta <= 1e-12 * max(abs(alphas[-1]), 1.0):
            break
        betas.append(beta)
        basis.append(w / beta)
    theta = eigh_tridiagonal(np.array(alphas), np.array(betas[: len(alphas) - 1]), eigvals_only=True)
    return (1.0 - margin) * float(theta[0]), (1.0 + margin) * float(theta[-1])


def cheb_solve(matvec, rhs: np.ndarray, k: int, bounds: tuple[float, float]) -> np.ndarray:
    """``k`` steps of the Chebyshev semi-iteration for ``A x = rhs``.

    Uses the classical three-term recurrence on ``[lmin, lmax]``; for fixed
    bounds this is a fixed polynomial in ``A`` and hence a linear operator.
    """
    lmin, lmax = bounds
    if not lmin > 0 or lmax < lmin:
        raise ValueError(f"invalid Chebyshev bounds {bounds}")
    theta = 0.5 * (lmax + lmin)
    delta = 0.5 * (lmax - lmin)
    x = np.zeros_like(rhs)
    r = rhs.copy()
    d = r / theta
    if delta <= 1e-14 * theta:
        for _ in range(k):
            x += d
            r = r - matvec(d)
            d = r / theta
        return x
    sigma = theta / delta
    rho = 1.0 / sigma
    for _ in range(k):
        x += d
        r = r - matvec(d)
        rho_new = 1.0 / (2.0 * sigma - rho)
        d = rho_new * rho * d + (2.0 * rho_new / delta) * r
        rho = rho_new
    return x


@dataclass
class TwoLevelContext:
    """Coarse-grid data for one outer iteration.

    Built from a fine :class:`EvalState`; invalid once the fine velocity
    changes. Eigenvalue bounds for CHEB are computed once and cached.
    """

    fine_state: EvalState
    coarse_state: EvalState
    coarse_grid: Grid3
    inner: tuple
    bounds: tuple[float, float] | None = None
    valid: bool = True
    warnings: list = field(default_factory=list)

    @property
    def fine_grid(self) -> Grid3:
        return self.fine_state.problem.grid

    def invalidate(self):
        self.valid = False

    def check(self):
        if not self.valid:
            raise StaleContextError("two-level context used after the velocity changed")

    def cheb_bounds(self) -> tuple[float, float]:
        if self.bounds is None:
            problem = self.coarse_state.problem
            problem.counters.lanczos_runs += 1
            self.bounds = lanczos_bounds(
                lambda u: coarse_hessian_matvec(self, u),
                self.coarse_grid.vector_shape,
                seed=problem.config.seed,
                dtype=problem.dtype,
            )
        return self.bounds


def build_twolevel_context(state: EvalState, inner: str | None = None) -> TwoLevelContext:
    """Restrict ``v`` and the state history to half resolution.

    Costs one coarse characteristic trace; no PDE solves on either grid.
    """
    problem = state.problem
    cfg: RegConfig = problem.config
    coarse = problem.grid.coarsen(2)
    inner_cfg = cfg if inner is None else cfg.replace(inner=inner)
    vc = spectral_resample(state.v, coarse)
    mR = spectral_resample(problem.m_R, coarse)
    mT = spectral_resample(problem.m_T, coarse)
    cproblem = RegistrationProblem(mR, mT, cfg, problem.counters, level="coarse")
    chars = tr.trace_characteristics(vc, cfg.n_t)
    hist = spectral_resample(state.m_history, coarse)
    grads = tr.state_gradients(hist, chars) if cfg.cache_state_gradients else None
    cstate = EvalState(cproblem, vc, chars, hist, np.nan, np.nan, np.nan, np.nan, grads)
    if not cfg.gauss_newton and state.lam_history is not None:
        cstate.lam_history = spectral_resample(state.lam_history, coarse)
    return TwoLevelContext(state, cstate, coarse, inner_cfg.inner_solver())


def coarse_hessian_matvec(ctx: TwoLevelContext, u: np.ndarray) -> np.ndarray:
    """Split-form Hessian ``I + Hbar_reg^{-1/2} Hbar_data Hbar_reg^{-1/2}`` on the coarse grid.

    The constants keep the identity (see :func:`split_system_matvec`).
    """
    ctx.check()
    if u.shape != ctx.coarse_grid.vector_shape:
        raise ValueError(f"coarse field has shape {u.shape}, expected {ctx.coarse_grid.vector_shape}")
    return split_system_matvec(ctx.coarse_state, u, exact_zero_mode=False)


def apply_twolevel_precond(ctx: TwoLevelContext, s: np.ndarray, eps_H: float = 0.5) -> np.ndarray:
    """Apply ``M s = F_L Q_P Sbar^{-1} Q_R F_L s + F_H s``."""
    from .solver import pcg_solve

    ctx.check()
    cdims = ctx.coarse_grid.dims
    low = frequency_filter(s, "low", cdims)
    high = s - low
    rhs = spectral_resample(low, ctx.coarse_grid)
    kind, arg = ctx.inner
    if kind == "pcg":
        cfg = ctx.coarse_state.problem.config
        u, stats = pcg_solve(lambda x: coarse_hessian_matvec(ctx, x), rhs, arg * eps_H,
                             max_krylov=cfg.max_krylov)
        if not stats.converged and stats.iterations > 0:
            warnings.warn("coarse solve did not reach its tolerance", RuntimeWarning, stacklevel=2)
            ctx.warnings.append("coarse solve did not converge")
    else:
        u = cheb_solve(lambda x: coarse_hessian_matvec(ctx, x), rhs, int(arg), ctx.cheb_bounds())
    back = frequency_filter(spectral_resample(u, ctx.fine_grid), "low", cdims)
    return ctx.fine_state.problem.project(back + high)
