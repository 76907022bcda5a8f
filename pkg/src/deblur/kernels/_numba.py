"""Numba-jitted twins of the hot kernels.

Semantics match kernels._numpy exactly (up to accumulation rounding).
Parallel loops only ever write disjoint output elements and every per-element
accumulation runs in a fixed order, so results are bit-identical across runs
and thread counts. fastmath stays off for the same reason.
"""

import math

import numpy as np
from numba import njit, prange

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


@njit(parallel=True, cache=True)
def dwconv2d(x, w):
    n, c, h, wd = x.shape
    out = np.empty_like(x)
    for nc in prange(n * c):
        i = nc // c
        j = nc % c
        for y in range(h):
            for xx in range(wd):
                acc = 0.0
                for dy in range(3):
                    yy = y + dy - 1
                    if yy < 0 or yy >= h:
                        continue
                    for dx in range(3):
                        xc = xx + dx - 1
                        if xc < 0 or xc >= wd:
                            continue
                        acc += w[j, dy, dx] * x[i, j, yy, xc]
                out[i, j, y, xx] = acc
    return out


@njit(parallel=True, cache=True)
def dwconv2d_weight_grad(g, x):
    n, c, h, wd = x.shape
    gw = np.zeros((c, 3, 3), dtype=x.dtype)
    for j in prange(c):
        acc = np.zeros((3, 3), dtype=np.float64)
        for i in range(n):
            for y in range(h):
                for xx in range(wd):
                    gv = g[i, j, y, xx]
                    for dy in range(3):
                        yy = y + dy - 1
                        if yy < 0 or yy >= h:
                            continue
                        for dx in range(3):
                            xc = xx + dx - 1
                            if xc < 0 or xc >= wd:
                                continue
                            acc[dy, dx] += gv * x[i, j, yy, xc]
        for dy in range(3):
            for dx in range(3):
                gw[j, dy, dx] = acc[dy, dx]
    return gw


@njit(parallel=True, cache=True)
def gelu_fwd(x):
    out = np.empty_like(x)
    xf = x.ravel()
    of = out.ravel()
    for i in prange(xf.size):
        v = xf[i]
        of[i] = 0.5 * v * (1.0 + math.erf(v * _INV_SQRT2))
    return out


@njit(parallel=True, cache=True)
def gelu_bwd(x):
    out = np.empty_like(x)
    xf = x.ravel()
    of = out.ravel()
    for i in prange(xf.size):
        v = xf[i]
        phi = math.exp(-0.5 * v * v) * _INV_SQRT2PI
        of[i] = 0.5 * (1.0 + math.erf(v * _INV_SQRT2)) + v * phi
    return out
