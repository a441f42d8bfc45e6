"""Periodic grids, quadrature and Fourier-domain operators.

Fields are plain numpy arrays on the periodic box ``(0, 2*pi)^3``:

* scalar field: shape ``(n1, n2, n3)``, C (row-major) order, axis 0 is ``x1``
* vector field: shape ``(3, n1, n2, n3)``, component ``a`` is ``v[a]``
* time series: shape ``(n_t + 1, n1, n2, n3)``, slice ``j`` lives at ``t = j / n_t``

Grid point ``k`` sits at ``x_k = 2*pi*k / n`` along each axis.

All spectral operators use the real-to-complex transform ``scipy.fft.rfftn``
over the last three axes, so the last axis holds ``n3 // 2 + 1`` non-negative
wavenumbers. Wavenumbers are the integers ``k`` with ``exp(i k x)`` the
corresponding Fourier mode. Odd-order derivatives use ``k_odd``, in which the
unmatched Nyquist mode of an even axis is zeroed; even-order operators use the
full ``k``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

__all__ = [
    "Grid3",
    "RegNorm",
    "DegenerateInputWarning",
    "fft_workers",
    "set_fft_workers",
    "grid_of",
    "check_same_grid",
    "inner_product",
    "norm_l2",
    "rescale_intensity",
    "gaussian_smooth",
    "spectral_derivative",
    "gradient",
    "divergence",
    "laplacian",
    "reg_symbol",
    "apply_reg_operator",
    "apply_div_penalty",
    "apply_reg_hessian",
    "apply_projection_K",
    "frequency_filter",
    "spectral_resample",
]

_FFT_WORKERS = 1


def set_fft_workers(workers: int) -> None:
    """Set the number of threads used by every transform in the package."""
    global _FFT_WORKERS
    if workers < 1:
        raise ValueError("workers must be >= 1")
    _FFT_WORKERS = int(workers)


def fft_workers() -> int:
    return _FFT_WORKERS


@dataclass(frozen=True)
class Grid3:
    """Uniform periodic grid on ``(0, 2*pi)^3``.

    Parameters
    ----------
    dims : tuple of int
        Number of points ``(n1, n2, n3)``; each must be at least 4 so the
        tricubic stencil fits.
    """

    dims: tuple[int, int, int]

    def __post_init__(self):
        dims = tuple(int(n) for n in self.dims)
        if len(dims) != 3:
            raise ValueError(f"grid needs 3 dims, got {len(dims)}")
        if min(dims) < 4:
            raise ValueError(f"every grid dim must be >= 4, got {dims}")
        object.__setattr__(self, "dims", dims)

    @classmethod
    def cube(cls, n: int) -> "Grid3":
        return cls((n, n, n))

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(2.0 * np.pi / n for n in self.dims)

    @property
    def cell_volume(self) -> float:
        h1, h2, h3 = self.spacing
        return h1 * h2 * h3

    @property
    def size(self) -> int:
        n1, n2, n3 = self.dims
        return n1 * n2 * n3

    @property
    def vector_shape(self) -> tuple[int, int, int, int]:
        return (3,) + self.dims

    def coords(self, dtype=np.float64) -> np.ndarray:
        """Physical grid coordinates as a vector field."""
        axes = [2.0 * np.pi * np.arange(n) / n for n in self.dims]
        return np.stack(np.meshgrid(*axes, indexing="ij")).astype(dtype)

    def coarsen(self, factor: int = 2) -> "Grid3":
        if any(n % factor for n in self.dims):
            raise ValueError(f"dims {self.dims} not divisible by {factor}")
        return Grid3(tuple(n // factor for n in self.dims))

    def refine(self, factor: int = 2) -> "Grid3":
        return Grid3(tuple(n * factor for n in self.dims))


@dataclass(frozen=True)
class RegNorm:
    """Regularization norm for the velocity.

    Parameters
    ----------
    kind : {"h1", "h2", "h3", "helmholtz"}
        Seminorm order, or the Helmholtz operator ``-lap + gamma``.
    gamma : float
        Shift of the Helmholtz operator.
    helmholtz_power : {1, 2}
        ``A = (-lap + gamma)`` for 1, ``A = (-lap + gamma)^2`` for 2.
    div_penalty : bool
        Add ``beta_w/2 * int |grad w|^2 + w^2`` with ``w = div v``.
    beta_w : float
        Weight of the divergence penalty.
    """

    kind: str = "h1"
    gamma: float = 1.0
    helmholtz_power: int = 2
    div_penalty: bool = False
    beta_w: float = 1e-4

    def __post_init__(self):
        if self.kind not in ("h1", "h2", "h3", "helmholtz"):
            raise ValueError(f"unknown norm kind {self.kind!r}")
        if self.kind == "helmholtz":
            if not self.gamma > 0:
                raise ValueError("Helmholtz norm needs gamma > 0")
            if self.helmholtz_power not in (1, 2):
                raise ValueError("helmholtz_power must be 1 or 2")
        if self.div_penalty and not self.beta_w > 0:
            raise ValueError("divergence penalty needs beta_w > 0")

    @classmethod
    def parse(cls, text: str, beta_w: float = 1e-4) -> "RegNorm":
        """Parse ``h1div``, ``h1``, ``h2``, ``h3`` or ``helmholtz:<gamma>``."""
        text = text.strip().lower()
        if text == "h1div":
            return cls("h1", div_penalty=True, beta_w=beta_w)
        if text in ("h1", "h2", "h3"):
            return cls(text, beta_w=beta_w)
        if text.startswith("helmholtz"):
            _, _, gamma = text.partition(":")
            return cls("helmholtz", gamma=float(gamma) if gamma else 1.0, beta_w=beta_w)
        raise ValueError(f"unknown norm {text!r}")

    @property
    def label(self) -> str:
        if self.kind == "helmholtz":
            return f"helmholtz:{self.gamma:g}"
        return self.kind + ("div" if self.div_penalty else "")

    @property
    def has_zero_mode(self) -> bool:
        return self.kind != "helmholtz"


class DegenerateInputWarning(UserWarning):
    """Raised (as a warning) when an image has no intensity range."""


@dataclass(frozen=True)
class _Spectrum:
    k: tuple[np.ndarray, np.ndarray, np.ndarray]
    k_odd: tuple[np.ndarray, np.ndarray, np.ndarray]
    ksq: np.ndarray
    kosq: np.ndarray


@lru_cache(maxsize=16)
def _spectrum(dims: tuple[int, int, int]) -> _Spectrum:
    n1, n2, n3 = dims
    raw = [
        np.fft.fftfreq(n1, 1.0 / n1),
        np.fft.fftfreq(n2, 1.0 / n2),
        np.fft.rfftfreq(n3, 1.0 / n3),
    ]
    k, ko = [], []
    for axis, (kk, n) in enumerate(zip(raw, dims)):
        odd = kk.copy()
        if n % 2 == 0:
            odd[np.abs(kk) == n // 2] = 0.0
        shape = [1, 1, 1]
        shape[axis] = kk.size
        k.append(kk.reshape(shape))
        ko.append(odd.reshape(shape))
    ksq = k[0] ** 2 + k[1] ** 2 + k[2] ** 2
    kosq = ko[0] ** 2 + ko[1] ** 2 + ko[2] ** 2
    for arr in (*k, *ko, ksq, kosq):
        arr.setflags(write=False)
    return _Spectrum(tuple(k), tuple(ko), ksq, kosq)


def _fwd(f: np.ndarray) -> np.ndarray:
    return sfft.rfftn(f, axes=(-3, -2, -1), workers=_FFT_WORKERS)


def _inv(fh: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    return sfft.irfftn(fh, s=dims, axes=(-3, -2, -1), workers=_FFT_WORKERS)


def grid_of(f: np.ndarray) -> Grid3:
    """Grid implied by the trailing three axes of a field."""
    if f.ndim < 3:
        raise ValueError(f"field must have at least 3 dims, got shape {f.shape}")
    return Grid3(f.shape[-3:])


def check_same_grid(*fields: np.ndarray) -> Grid3:
    """Raise ``ValueError`` unless all fields share trailing grid dims."""
    grid = grid_of(fields[0])
    for f in fields[1:]:
        if f.shape[-3:] != grid.dims:
            raise ValueError(f"grid mismatch: {grid.dims} vs {f.shape[-3:]}")
    return grid


def inner_product(a: np.ndarray, b: np.ndarray) -> float:
    """Rectangle-rule L2 inner product ``sum(a * b) * h1 * h2 * h3``.

    On a periodic uniform grid the rectangle rule is the trapezoidal rule.
    The sum is accumulated in float64 in a fixed order.
    """
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    grid = grid_of(a)
    s = np.dot(a.ravel().astype(np.float64, copy=False), b.ravel().astype(np.float64, copy=False))
    return float(s) * grid.cell_volume


def norm_l2(f: np.ndarray) -> float:
    """Euclidean (l2) norm of the discrete vector, accumulated in float64."""
    x = f.ravel().astype(np.float64, copy=False)
    return float(np.sqrt(np.dot(x, x)))


def rescale_intensity(f: np.ndarray) -> np.ndarray:
    """Affinely map intensities to ``[0, 1]``.

    A constant image has no range; it is mapped to zeros and a
    :class:`DegenerateInputWarning` is issued.
    """
    lo, hi = float(f.min()), float(f.max())
    if not np.isfinite(lo) or not np.isfinite(hi):
        raise FloatingPointError("image contains non-finite values")
    if hi == lo:
        warnings.warn("constant image mapped to zeros", DegenerateInputWarning, stacklevel=2)
        return np.zeros_like(f)
    return ((f - lo) / (hi - lo)).astype(f.dtype, copy=False)


def gaussian_smooth(f: np.ndarray, sigma) -> np.ndarray:
    """Gaussian smoothing by a Fourier multiplier.

    ``sigma`` is the standard deviation in voxels, scalar or per axis. The
    transfer function is ``exp(-0.5 * sum_i sigma_i^2 h_i^2 k_i^2)`` and
    leaves the mean untouched.
    """
    grid = grid_of(f)
    sig = np.broadcast_to(np.asarray(sigma, dtype=np.float64), (3,))
    if np.any(sig < 0):
        raise ValueError("sigma must be non-negative")
    if not np.any(sig > 0):
        return f.copy()
    sp = _spectrum(grid.dims)
    h = grid.spacing
    expo = sum((sig[i] * h[i]) ** 2 * sp.k[i] ** 2 for i in range(3))
    return _inv(_fwd(f) * np.exp(-0.5 * expo), grid.dims).astype(f.dtype, copy=False)


def spectral_derivative(f: np.ndarray, op: str) -> np.ndarray:
    """Spectral ``grad`` (scalar -> vector), ``div`` (vector -> scalar) or
    ``laplacian`` (scalar or vector, componentwise)."""
    if op == "grad":
        return gradient(f)
    if op == "div":
        return divergence(f)
    if op == "laplacian":
        return laplacian(f)
    raise ValueError(f"unknown derivative {op!r}")


def gradient(f: np.ndarray) -> np.ndarray:
    grid = grid_of(f)
    if f.ndim != 3:
        raise ValueError("gradient expects a scalar field")
    ko = _spectrum(grid.dims).k_odd
    fh = _fwd(f)
    out = np.empty((3,) + grid.dims, dtype=f.dtype)
    for a in range(3):
        out[a] = _inv(1j * ko[a] * fh, grid.dims)
    return out


def divergence(v: np.ndarray) -> np.ndarray:
    grid = grid_of(v)
    if v.shape[0] != 3 or v.ndim != 4:
        raise ValueError("divergence expects a vector field")
    ko = _spectrum(grid.dims).k_odd
    vh = _fwd(v)
    return _inv(1j * (ko[0] * vh[0] + ko[1] * vh[1] + ko[2] * vh[2]), grid.dims).astype(v.dtype, copy=False)


def laplacian(f: np.ndarray) -> np.ndarray:
    grid = grid_of(f)
    return _inv(-_spectrum(grid.dims).ksq * _fwd(f), grid.dims).astype(f.dtype, copy=False)


def reg_symbol(dims: tuple[int, int, int], norm: RegNorm) -> np.ndarray:
    """Fourier symbol ``a(k)`` of ``A = B^* B`` on the rfft grid."""
    ksq = _spectrum(tuple(dims)).ksq
    if norm.kind == "h1":
        return ksq
    if norm.kind == "h2":
        return ksq**2
    if norm.kind == "h3":
        return ksq**3
    return (ksq + norm.gamma) ** norm.helmholtz_power


def _replace_zero(a: np.ndarray) -> np.ndarray:
    return np.where(a == 0.0, 1.0, a)


def apply_reg_operator(v: np.ndarray, norm: RegNorm, mode: str = "A") -> np.ndarray:
    """Apply ``A``, ``A^{-1}`` or ``A^{-1/2}`` as a Fourier multiplier.

    For the inverse modes, zero singular values of ``A`` (the constants for
    the seminorms) are replaced by one, so constants pass through.
    """
    grid = grid_of(v)
    a = reg_symbol(grid.dims, norm)
    if mode == "A":
        mult = a
    elif mode == "A_inverse":
        mult = 1.0 / _replace_zero(a)
    elif mode == "A_inv_sqrt":
        mult = 1.0 / np.sqrt(_replace_zero(a))
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return _inv(mult * _fwd(v), grid.dims).astype(v.dtype, copy=False)


def apply_div_penalty(v: np.ndarray) -> np.ndarray:
    """``P v = -grad((-lap + 1) div v)``, the L2 gradient of
    ``0.5 * int |grad w|^2 + w^2`` with ``w = div v``."""
    grid = grid_of(v)
    sp = _spectrum(grid.dims)
    vh = _fwd(v)
    dh = sp.k_odd[0] * vh[0] + sp.k_odd[1] * vh[1] + sp.k_odd[2] * vh[2]
    dh *= sp.ksq + 1.0
    out = np.empty_like(v)
    for a in range(3):
        out[a] = _inv(sp.k_odd[a] * dh, grid.dims)
    return out


def apply_reg_hessian(v: np.ndarray, norm: RegNorm, beta_v: float, power: float = 1.0) -> np.ndarray:
    """Apply a power of ``H_reg = beta_v A + beta_w P``.

    ``H_reg`` has symbol ``a I + b k k^T`` with ``a = beta_v a(k)`` and
    ``b = beta_w (|k|^2 + 1)`` (``b = 0`` without the divergence penalty).
    Its eigenvalues are ``a`` across ``k`` and ``a + b |k|^2`` along ``k``.
    For ``power = 1`` the exact operator is applied. For other powers the
    zero singular values of ``A`` are first replaced by one and then scaled
    by ``beta_v``, so the zero mode of ``H_reg^{-1}`` is ``1 / beta_v``.
    """
    if not beta_v > 0:
        raise ValueError("beta_v must be positive")
    grid = grid_of(v)
    sp = _spectrum(grid.dims)
    a = reg_symbol(grid.dims, norm)
    if power != 1.0:
        a = _replace_zero(a)
    a = beta_v * a
    vh = _fwd(v)
    if norm.div_penalty:
        b = norm.beta_w * (sp.ksq + 1.0)
        ko = sp.k_odd
        kdot = ko[0] * vh[0] + ko[1] * vh[1] + ko[2] * vh[2]
        par = a + b * sp.kosq
        with np.errstate(divide="ignore", invalid="ignore"):
            coef = np.where(sp.kosq > 0, (par**power - a**power) / np.where(sp.kosq > 0, sp.kosq, 1.0), 0.0)
        ap = a**power
        out = np.empty_like(v)
        for c in range(3):
            out[c] = _inv(ap * vh[c] + coef * ko[c] * kdot, grid.dims)
        return out
    return _inv(a**power * vh, grid.dims).astype(v.dtype, copy=False)


def apply_projection_K(f: np.ndarray, variant: str = "identity", beta_v: float | None = None,
                       beta_w: float | None = None) -> np.ndarray:
    """Apply a projection-type operator ``K``.

    ``identity`` returns a copy; ``incompressible`` is the Leray projection
    with multiplier ``I - k k^T / |k|^2`` (zero mode passed through);
    ``near_incompressible`` damps the divergence part with the scalar
    multiplier ``c = beta_w (|k|^2 + 1) / (beta_v + beta_w (|k|^2 + 1))``.
    """
    if variant == "identity":
        return f.copy()
    grid = grid_of(f)
    sp = _spectrum(grid.dims)
    ko = sp.k_odd
    if variant == "incompressible":
        c = 1.0
    elif variant == "near_incompressible":
        if beta_v is None or beta_w is None or not (beta_v > 0 and beta_w > 0):
            raise ValueError("near_incompressible needs positive beta_v and beta_w")
        bw = beta_w * (sp.ksq + 1.0)
        c = bw / (beta_v + bw)
    else:
        raise ValueError(f"unknown projection {variant!r}")
    fh = _fwd(f)
    safe = np.where(sp.kosq > 0, sp.kosq, 1.0)
    kdot = (ko[0] * fh[0] + ko[1] * fh[1] + ko[2] * fh[2]) * (c / safe)
    out = np.empty_like(f)
    for a in range(3):
        out[a] = _inv(fh[a] - ko[a] * kdot, grid.dims)
    return out


@lru_cache(maxsize=16)
def _low_mask(dims: tuple[int, int, int], cutoff: tuple[int, int, int]) -> np.ndarray:
    sp = _spectrum(dims)
    mask = np.ones((dims[0], dims[1], dims[2] // 2 + 1), dtype=bool)
    for i in range(3):
        if cutoff[i] < dims[i]:
            mask &= np.abs(sp.k[i]) < cutoff[i] / 2.0
    mask.setflags(write=False)
    return mask


def frequency_filter(f: np.ndarray, band: str, cutoff) -> np.ndarray:
    """Sharp cut-off filters ``F_L`` (``band="low"``) and ``F_H = I - F_L``.

    ``F_L`` keeps the modes with ``|k_i| < c_i / 2`` on every axis where the
    cutoff ``c_i`` is below the grid size, so the coarse Nyquist mode is
    treated as high frequency. With ``cutoff`` equal to the grid dims it is
    the identity.
    """
    grid = grid_of(f)
    cutoff = tuple(int(c) for c in cutoff)
    if any(c > n for c, n in zip(cutoff, grid.dims)):
        raise ValueError(f"cutoff {cutoff} exceeds grid {grid.dims}")
    if cutoff == grid.dims:
        low = f.copy()
    else:
        low = _inv(_fwd(f) * _low_mask(grid.dims, cutoff), grid.dims).astype(f.dtype, copy=False)
    if band == "low":
        return low
    if band == "high":
        return f - low
    raise ValueError(f"unknown band {band!r}")


def _resample_axis(F: np.ndarray, axis: int, m: int) -> np.ndarray:
    n = F.shape[axis]
    if m == n:
        return F
    F = np.moveaxis(F, axis, 0)
    freqs = np.rint(np.fft.fftfreq(n, 1.0 / n)).astype(int)
    out = np.zeros((m,) + F.shape[1:], dtype=F.dtype)
    if m < n:
        for i, k in enumerate(freqs):
            if abs(k) < m / 2.0 or (m % 2 == 0 and abs(k) == m // 2):
                out[k % m] += F[i]
    else:
        for i, k in enumerate(freqs):
            if n % 2 == 0 and abs(k) == n // 2:
                out[(-k) % m] += 0.5 * F[i]
                out[k % m] += 0.5 * F[i]
            else:
                out[k % m] += F[i]
    out *= m / n
    return np.moveaxis(out, 0, axis)


def spectral_resample(f: np.ndarray, target: Grid3 | tuple) -> np.ndarray:
    """Spectral restriction or prolongation onto another grid.

    Restriction keeps the coefficients inside the target band and folds the
    pair of fine modes at the coarse Nyquist frequency onto it; prolongation
    zero-pads and splits a Nyquist coefficient evenly between ``+/- n/2``.
    Coefficients are rescaled so point values are preserved, and
    restriction after prolongation is the identity.
    """
    grid = grid_of(f)
    dims = target.dims if isinstance(target, Grid3) else Grid3(tuple(target)).dims
    if dims == grid.dims:
        return f.copy()
    F = sfft.fftn(f, axes=(-3, -2, -1), workers=_FFT_WORKERS)
    lead = f.ndim - 3
    for i in range(3):
        F = _resample_axis(F, lead + i, dims[i])
    out = sfft.ifftn(F, axes=(-3, -2, -1), workers=_FFT_WORKERS).real
    return np.ascontiguousarray(out, dtype=f.dtype)
