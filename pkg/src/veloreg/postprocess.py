"""Deformation measures, label transport and overlap scores.

Map orientation: the state equation gives ``m(x, 1) = m_T(y(x))`` with ``y``
the pullback (Eulerian) map, i.e. the foot at ``t = 0`` of the characteristic
through ``(x, 1)``. Its Jacobian determinant ``J = det grad y`` obeys

    d_t J + v . grad J = -(div v) J,   J(., 0) = 1,

which is solved semi-Lagrangian with an exponential integrator, so ``J > 0``
by construction. ``inverse=True`` flips the sign of the growth rate and
returns ``1 / det grad y`` evaluated along the same characteristics, the
volume change of the forward map at ``y(x)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import transport as tr
from .fields import check_same_grid, divergence, gaussian_smooth, grid_of

__all__ = [
    "DeformationMeasures",
    "det_deformation_gradient",
    "deformation_map",
    "deformation_measures",
    "foreground_mask",
    "transport_labels",
    "overlap_scores",
    "TooManyLabelsError",
    "MAX_LABELS",
]

MAX_LABELS = 64


class TooManyLabelsError(ValueError):
    """More distinct label codes than the transport supports."""


def det_deformation_gradient(v: np.ndarray, n_t: int = 4, inverse: bool = False) -> np.ndarray:
    """Jacobian determinant of the pullback map generated by ``v``.

    Each step advects ``J`` to the departure point and multiplies by
    ``exp(-dt/2 (div v(X) + div v(x)))`` (plus sign when ``inverse``).
    For ``v = 0`` the result is exactly one.
    """
    chars = tr.trace_characteristics(v, n_t)
    dims = chars.grid.dims
    dv = divergence(v)
    dv_dep = tr._gather(dv[None], chars.departure).reshape(dims)
    sign = 1.0 if inverse else -1.0
    growth = np.exp(sign * 0.5 * chars.dt * (dv_dep + dv))
    J = np.ones(dims, dtype=v.dtype)
    for _ in range(n_t):
        J = tr._gather(J[None], chars.departure).reshape(dims) * growth
    return J


def _departure_displacement(chars: tr.Characteristics) -> np.ndarray:
    grid = chars.grid
    x = tr._flat_index_coords(grid)
    n = np.asarray(grid.dims, dtype=np.float64)[:, None]
    d = chars.departure - x
    d -= n * np.round(d / n)
    return (d * np.asarray(grid.spacing)[:, None]).reshape(grid.vector_shape)


def deformation_map(v: np.ndarray, n_t: int = 4, absolute: bool = False) -> np.ndarray:
    """Pullback map ``y = x + u(., 1)``.

    The displacement follows the characteristics of the state solver,
    ``u_{j+1}(x) = u_j(X(x)) + (X(x) - x)``, a discrete form of
    ``d_t u + v . grad u = -v``. Returns ``u`` (periodic-safe) by default or
    ``y`` wrapped to ``[0, 2*pi)`` with ``absolute=True``.
    """
    chars = tr.trace_characteristics(v, n_t)
    grid = chars.grid
    step = _departure_displacement(chars).astype(v.dtype)
    u = step.copy()
    for _ in range(n_t - 1):
        u = tr._gather(u, chars.departure).reshape(grid.vector_shape) + step
    if not absolute:
        return u
    return np.mod(grid.coords(v.dtype) + u, 2.0 * np.pi)


def foreground_mask(m_R: np.ndarray, threshold: float = 0.05) -> np.ndarray:
    """Voxels where the (rescaled) reference image exceeds ``threshold``."""
    return m_R > threshold


@dataclass
class DeformationMeasures:
    """Determinant field, its statistics over a mask, and the map."""

    det_grad: np.ndarray
    det_min: float
    det_mean: float
    det_max: float
    map: np.ndarray
    map_is_absolute: bool = False


def deformation_measures(v: np.ndarray, n_t: int = 4, mask: np.ndarray | None = None,
                         absolute: bool = False) -> DeformationMeasures:
    J = det_deformation_gradient(v, n_t)
    vals = J if mask is None else J[mask]
    if vals.size == 0:
        raise ValueError("mask selects no voxels")
    return DeformationMeasures(J, float(vals.min()), float(vals.mean()), float(vals.max()),
                               deformation_map(v, n_t, absolute), absolute)


def transport_labels(labels: np.ndarray, v: np.ndarray, n_t: int = 4, sigma: float = 1.0) -> np.ndarray:
    """Deform an integer label map with the state transport.

    Every code is turned into a binary mask, smoothed with ``sigma`` voxels,
    transported, and the codes are reassembled by the largest response
    (lowest code on ties). Voxels where no response reaches 0.5 get the
    lowest code, conventionally the background.
    """
    grid = check_same_grid(labels, v)
    codes = np.unique(labels)
    if codes.size > MAX_LABELS:
        raise TooManyLabelsError(f"{codes.size} labels exceed the limit of {MAX_LABELS}")
    chars = tr.trace_characteristics(v, n_t)
    best = np.full(grid.dims, -np.inf)
    out = np.full(grid.dims, codes[0], dtype=labels.dtype)
    for code in codes:
        mask = (labels == code).astype(v.dtype)
        resp = tr.solve_state(gaussian_smooth(mask, sigma), chars, needs_history=False)
        take = (resp > best) & (resp >= 0.5)
        out[take] = code
        best = np.where(resp > best, resp, best)
    return out


def _scores(A: np.ndarray, B: np.ndarray) -> dict:
    a, b = int(A.sum()), int(B.sum())
    inter = int(np.logical_and(A, B).sum())
    return {
        "dice": 1.0 if a + b == 0 else 2.0 * inter / (a + b),
        "false_positive_rate": 0.0 if b == 0 else (b - inter) / b,
        "false_negative_rate": 0.0 if a == 0 else (a - inter) / a,
    }


def overlap_scores(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None,
                   background: int = 0) -> dict:
    """Dice and error rates between a reference labeling ``a`` and ``b``.

    With ``A``, ``B`` the voxel sets of one label: ``dice = 2|A & B| /
    (|A| + |B|)``, ``false_positive_rate = |B \\ A| / |B|`` and
    ``false_negative_rate = |A \\ B| / |A|``; so swapping the arguments swaps
    the two rates. Empty sets give dice 1 and zero rates. Scores are
    returned per label code (background excluded) and under ``"union"`` for
    the union of all non-background labels.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    grid_of(a)
    if mask is not None:
        a, b = a[mask], b[mask]
    out = {}
    for code in np.union1d(np.unique(a), np.unique(b)):
        if code == background:
            continue
        out[int(code)] = _scores(a == code, b == code)
    out["union"] = _scores(a != background, b != background)
    return out
