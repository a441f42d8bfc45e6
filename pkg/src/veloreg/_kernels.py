"""Compiled tricubic Lagrange kernels on a periodic grid.

Query points are given in index units (``x / h`` per axis), so grid point
``(i, j, k)`` sits at ``(i, j, k)``. Each query uses the 4 x 4 x 4 stencil
``floor(p) - 1 ... floor(p) + 2`` per axis, wrapped periodically.

Gather kernels are data parallel with one writer per query point; the
transpose (scatter) kernel runs sequentially in a fixed order so results do
not depend on the thread count.
"""

import numpy as np
from numba import config, njit, prange

# prefer OpenMP over a possibly outdated TBB install
if config.THREADING_LAYER == "default":
    config.THREADING_LAYER_PRIORITY = ["omp", "tbb", "workqueue"]


@njit(cache=True)
def _weights(s):
    sm1 = s - 1.0
    sm2 = s - 2.0
    sp1 = s + 1.0
    return (
        -s * sm1 * sm2 / 6.0,
        sp1 * sm1 * sm2 / 2.0,
        -sp1 * s * sm2 / 2.0,
        sp1 * s * sm1 / 6.0,
    )


@njit(cache=True)
def _dweights(s):
    s2 = 3.0 * s * s
    return (
        -(s2 - 6.0 * s + 2.0) / 6.0,
        (s2 - 4.0 * s - 1.0) / 2.0,
        -(s2 - 2.0 * s - 2.0) / 2.0,
        (s2 - 1.0) / 6.0,
    )


@njit(cache=True)
def _base(p, n):
    fl = np.floor(p)
    i = int(fl) - 1
    return (i % n, (i + 1) % n, (i + 2) % n, (i + 3) % n), p - fl


@njit(parallel=True, cache=True)
def interp(f, p0, p1, p2, out):
    """out[c, q] = I(f[c])(p[q]) for a stack of fields ``f`` (nf, n1, n2, n3)."""
    nf, n1, n2, n3 = f.shape
    for q in prange(p0.shape[0]):
        ix, sx = _base(p0[q], n1)
        iy, sy = _base(p1[q], n2)
        iz, sz = _base(p2[q], n3)
        wx = _weights(sx)
        wy = _weights(sy)
        wz = _weights(sz)
        for c in range(nf):
            acc = 0.0
            for a in range(4):
                acc_y = 0.0
                for b in range(4):
                    acc_z = 0.0
                    for d in range(4):
                        acc_z += wz[d] * f[c, ix[a], iy[b], iz[d]]
                    acc_y += wy[b] * acc_z
                acc += wx[a] * acc_y
            out[c, q] = acc


@njit(parallel=True, cache=True)
def interp_grad(f, p0, p1, p2, inv_h, val, grad):
    """Values and physical gradients of the interpolants of a field stack.

    val[c, q] = I(f[c])(p[q]); grad[c, a, q] = d/dx_a I(f[c])(p[q]).
    """
    nf, n1, n2, n3 = f.shape
    for q in prange(p0.shape[0]):
        ix, sx = _base(p0[q], n1)
        iy, sy = _base(p1[q], n2)
        iz, sz = _base(p2[q], n3)
        wx = _weights(sx)
        wy = _weights(sy)
        wz = _weights(sz)
        dx = _dweights(sx)
        dy = _dweights(sy)
        dz = _dweights(sz)
        for c in range(nf):
            v = 0.0
            g0 = 0.0
            g1 = 0.0
            g2 = 0.0
            for a in range(4):
                vy = 0.0
                gy = 0.0
                gz = 0.0
                for b in range(4):
                    sz_ = 0.0
                    tz = 0.0
                    for d in range(4):
                        fv = f[c, ix[a], iy[b], iz[d]]
                        sz_ += wz[d] * fv
                        tz += dz[d] * fv
                    vy += wy[b] * sz_
                    gy += dy[b] * sz_
                    gz += wy[b] * tz
                v += wx[a] * vy
                g0 += dx[a] * vy
                g1 += wx[a] * gy
                g2 += wx[a] * gz
            val[c, q] = v
            grad[c, 0, q] = g0 * inv_h[0]
            grad[c, 1, q] = g1 * inv_h[1]
            grad[c, 2, q] = g2 * inv_h[2]


@njit(cache=True)
def interp_transpose(vals, p0, p1, p2, out):
    """Adjoint of :func:`interp`: out[c] += sum_q w(q, .) vals[c, q].

    ``out`` must be zero-initialized by the caller. Sequential so the
    accumulation order is fixed.
    """
    nf, n1, n2, n3 = out.shape
    for q in range(p0.shape[0]):
        ix, sx = _base(p0[q], n1)
        iy, sy = _base(p1[q], n2)
        iz, sz = _base(p2[q], n3)
        wx = _weights(sx)
        wy = _weights(sy)
        wz = _weights(sz)
        for c in range(nf):
            val = vals[c, q]
            for a in range(4):
                va = wx[a] * val
                for b in range(4):
                    vb = wy[b] * va
                    for d in range(4):
                        out[c, ix[a], iy[b], iz[d]] += wz[d] * vb
