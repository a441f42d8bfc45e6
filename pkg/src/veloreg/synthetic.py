"""Synthetic registration problems with a known velocity."""

from __future__ import annotations

import numpy as np

from .fields import Grid3, gaussian_smooth
from .transport import solve_state

__all__ = ["synthetic_template", "synthetic_velocity", "generate_synthetic", "ball_pair"]


def synthetic_template(grid: Grid3, dtype=np.float64) -> np.ndarray:
    """``m_T = (sin^2 x1 + sin^2 x2 + sin^2 x3) / 3``, with values in ``[0, 1]``."""
    x = grid.coords()
    return ((np.sin(x[0]) ** 2 + np.sin(x[1]) ** 2 + np.sin(x[2]) ** 2) / 3.0).astype(dtype)


def synthetic_velocity(grid: Grid3, dtype=np.float64) -> np.ndarray:
    """``v* = (sin x3 cos x2 sin x2, sin x1 cos x3 sin x3, sin x2 cos x1 sin x1)``.

    Each component depends only on the other two coordinates, so ``v*`` is
    divergence free.
    """
    x1, x2, x3 = grid.coords()
    return np.stack([
        np.sin(x3) * np.cos(x2) * np.sin(x2),
        np.sin(x1) * np.cos(x3) * np.sin(x3),
        np.sin(x2) * np.cos(x1) * np.sin(x1),
    ]).astype(dtype)


def generate_synthetic(grid: Grid3, n_t: int = 4, dtype=np.float64):
    """Return ``(m_R, m_T, v*)`` with ``m_R`` the template transported by ``v*``."""
    m_T = synthetic_template(grid, dtype)
    v = synthetic_velocity(grid, dtype)
    m_R = solve_state(m_T, v, n_t, needs_history=False)
    return m_R, m_T, v


def ball_pair(grid: Grid3, r_template: float = 1.6, r_reference: float = 1.0, sigma: float = 1.0,
              dtype=np.float64):
    """A smoothed centered ball shrunk from ``r_template`` to ``r_reference``.

    Matching the pair needs a volume change of ``(r_template / r_reference)^3``,
    which makes ``det grad y`` leave ``[eps_J, 1 / eps_J]`` for small
    regularization weights. Returns ``(m_R, m_T)``.
    """
    x = grid.coords()
    r = np.sqrt(((x - np.pi) ** 2).sum(axis=0))
    m_T = gaussian_smooth((r < r_template).astype(np.float64), sigma)
    m_R = gaussian_smooth((r < r_reference).astype(np.float64), sigma)
    return m_R.astype(dtype), m_T.astype(dtype)
