"""Generalised distance transform for quadratic deformation costs.

    out(p) = max_q  f(q) - (a0*dx^2 + a1*dx + a2*dy^2 + a3*dy),   (dx, dy) = q - (p + anchor)

computed separably with the upper envelope of parabolas, linear per row and column.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _dt1d(f, a, b, shift, out, arg, v, z):
    n = f.shape[0]
    # a == 0: the cost is linear in (q - t), so the best q is independent of t
    if a == 0.0:
        best = -np.inf
        bq = -1
        for q in range(n):
            val = f[q] - b * q
            if val > best:
                best = val
                bq = q
        for p in range(n):
            if bq < 0:
                out[p] = -np.inf
                arg[p] = 0
            else:
                t = p + shift
                out[p] = f[bq] - b * (bq - t)
                arg[p] = bq
        return
    k = -1
    for q in range(n):
        if f[q] == -np.inf:
            continue
        cq = f[q] - a * q * q - b * q
        if k < 0:
            k = 0
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        while True:
            r = v[k]
            cr = f[r] - a * r * r - b * r
            s = (cr - cq) / (2.0 * a * (q - r))
            if s <= z[k] and k > 0:
                k -= 1
            else:
                break
        if s <= z[k]:
            # k == 0 and the new parabola dominates everywhere
            v[0] = q
            z[0] = -np.inf
            z[1] = np.inf
            continue
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    if k < 0:
        for p in range(n):
            out[p] = -np.inf
            arg[p] = 0
        return
    j = 0
    for p in range(n):
        t = p + shift
        while z[j + 1] < t:
            j += 1
        q = v[j]
        d = q - t
        out[p] = f[q] - a * d * d - b * d
        arg[p] = q


@njit(cache=True)
def _dt2d(values, ax2, ax1, ay2, ay1, anchor_y, anchor_x, out, iy, ix):
    H, W = values.shape
    tmp = np.empty((H, W))
    tx = np.empty((H, W), dtype=np.int64)
    n = max(H, W)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    row_out = np.empty(W)
    row_arg = np.empty(W, dtype=np.int64)
    for y in range(H):
        _dt1d(values[y], ax2, ax1, anchor_x, row_out, row_arg, v, z)
        tmp[y] = row_out
        tx[y] = row_arg
    col = np.empty(H)
    col_out = np.empty(H)
    col_arg = np.empty(H, dtype=np.int64)
    for x in range(W):
        for y in range(H):
            col[y] = tmp[y, x]
        _dt1d(col, ay2, ay1, anchor_y, col_out, col_arg, v, z)
        for y in range(H):
            out[y, x] = col_out[y]
            iy[y, x] = col_arg[y]
            ix[y, x] = tx[col_arg[y], x]


def quadratic_dt(values: np.ndarray, a, anchor=(0, 0)):
    """Max-convolution of ``values`` with a quadratic deformation penalty.

    ``a`` is (a_dx2, a_dx, a_dy2, a_dy); ``anchor`` is the expected (dy, dx)
    offset of the child relative to the parent.  Returns the transformed grid
    and the (row, col) arg-max grids.
    """
    vals = np.ascontiguousarray(values, dtype=np.float64)
    if vals.ndim != 2:
        raise ValueError("values must be a 2-D grid")
    a = np.asarray(a, dtype=np.float64)
    if a[0] < 0 or a[2] < 0:
        raise ValueError(f"negative quadratic deformation coefficient in {a.tolist()}")
    out = np.empty_like(vals)
    iy = np.empty(vals.shape, dtype=np.int64)
    ix = np.empty(vals.shape, dtype=np.int64)
    if vals.size:
        _dt2d(vals, float(a[0]), float(a[1]), float(a[2]), float(a[3]),
              float(anchor[0]), float(anchor[1]), out, iy, ix)
    return out, (iy, ix)
