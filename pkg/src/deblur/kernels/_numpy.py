"""Pure-numpy implementations of the hot inner kernels.

Fallback path when numba is unavailable or DEBLUR_KERNELS=numpy. The depthwise
convolution is expressed as nine shifted multiply-accumulates so it stays
vectorized; the numba twin fuses them into one pass.
"""

import numpy as np
from scipy.special import erf

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def dwconv2d(x, w):
    """Depthwise 3x3 convolution, stride 1, zero padding 1.

    x: (N, C, H, W), w: (C, 3, 3). Channel i sees only kernel i.
    """
    n, c, h, wd = x.shape
    xp = np.zeros((n, c, h + 2, wd + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    out = np.zeros_like(x)
    for dy in range(3):
        for dx in range(3):
            out += w[:, dy, dx][None, :, None, None] * xp[:, :, dy:dy + h, dx:dx + wd]
    return out


def dwconv2d_weight_grad(g, x):
    """Gradient of dwconv2d w.r.t. the (C, 3, 3) kernels."""
    n, c, h, wd = x.shape
    xp = np.zeros((n, c, h + 2, wd + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x
    gw = np.empty((c, 3, 3), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            gw[:, dy, dx] = (g * xp[:, :, dy:dy + h, dx:dx + wd]).sum(axis=(0, 2, 3))
    return gw


def gelu_fwd(x):
    """Exact (erf-form) GELU."""
    return (0.5 * x * (1.0 + erf(x * _INV_SQRT2))).astype(x.dtype, copy=False)


def gelu_bwd(x):
    """d GELU(x) / dx = Phi(x) + x * phi(x)."""
    phi = np.exp(-0.5 * x * x) * _INV_SQRT2PI
    return (0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * phi).astype(x.dtype, copy=False)
