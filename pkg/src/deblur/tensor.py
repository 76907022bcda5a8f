"""Dense N-D tensors with tape-based reverse-mode automatic differentiation.

The op set is exactly what the deblurring model and its losses need: pointwise
arithmetic, matmul, 1x1 / depthwise / full 3x3 convolutions, channel layer
norm, GELU, softmax, pixel (un)shuffle, DFT magnitude, and the reshape /
concat plumbing between them. Forward ops append a record to a module-level
tape; ``backward`` replays the tape in exact reverse execution order and
accumulates gradients additively into every leaf that requires them.

Float32 is the working precision; float64 exists for gradient and oracle
checks. Every op validates that its output is finite and raises NonFiniteError
otherwise rather than letting NaN/Inf propagate.

DFT convention: unnormalized forward transform (no 1/N factor). The frequency
loss scale depends on this, so do not change it silently.
"""

from __future__ import annotations

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float32

_FLOAT_DTYPES = (np.float32, np.float64)


class TensorError(ValueError):
    """Shape/argument violation in a tensor op."""


class NonFiniteError(ArithmeticError):
    """An op produced NaN or Inf."""


class TapeError(RuntimeError):
    """Backward called on an empty/consumed tape or a non-scalar loss."""


_finite_checks = True


def set_finite_checks(enabled):
    """Toggle the NaN/Inf guard on op outputs. Returns the previous setting."""
    global _finite_checks
    prev = _finite_checks
    _finite_checks = bool(enabled)
    return prev


def _check_finite(arr, opname):
    if _finite_checks and not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{opname} produced non-finite values")


class Tensor:
    """Immutable dense array, optionally participating in the gradient tape.

    grad is populated (and accumulated additively) by backward(); it always has
    the same shape as data.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            raise TensorError("wrap raw array data, not another Tensor")
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        _check_finite(self.data, "Tensor()")

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        if self.data.size != 1:
            raise TensorError("item() requires a scalar tensor")
        return float(self.data.reshape(()))

    def numpy(self):
        """The underlying array (shared, treat as read-only)."""
        return self.data

    def zero_grad(self):
        self.grad = None

    def _accumulate_grad(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{flag})"


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

class Tape:
    """Ordered record of executed differentiable ops."""

    def __init__(self):
        self._records = []  # (output Tensor, backward closure)
        self._on_tape = set()  # id() of recorded outputs

    def record(self, out, backward_fn):
        self._records.append((out, backward_fn))
        self._on_tape.add(id(out))

    def __len__(self):
        return len(self._records)

    def clear(self):
        self._records.clear()
        self._on_tape.clear()


_TAPE = Tape()
_grad_enabled = True


def tape():
    return _TAPE


def reset_tape():
    _TAPE.clear()


class no_grad:
    """Context manager disabling tape recording (inference / validation)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def _make_output(data, inputs, backward_fn, opname):
    _check_finite(data, opname)
    requires = _grad_enabled and any(
        isinstance(t, Tensor) and t.requires_grad for t in inputs
    )
    out = Tensor.__new__(Tensor)
    out.data = np.ascontiguousarray(data)
    out.requires_grad = requires
    out.grad = None
    if requires:
        _TAPE.record(out, backward_fn)
    return out


def backward(loss):
    """Populate d(loss)/d(leaf) for every requires_grad leaf on the tape.

    Consumes the tape: a second call without new forward work raises TapeError.
    """
    if not isinstance(loss, Tensor):
        raise TapeError("backward expects a Tensor loss")
    if loss.size != 1:
        raise TapeError(f"loss must be scalar, got shape {loss.shape}")
    if len(_TAPE) == 0:
        raise TapeError("tape is empty (backward already consumed it, or no ops ran)")
    if id(loss) not in _TAPE._on_tape:
        raise TapeError("loss is not an op output on the current tape")
    loss.grad = np.ones_like(loss.data)
    records = _TAPE._records
    for out, backward_fn in reversed(records):
        if out.grad is not None:
            backward_fn(out.grad)
    _TAPE.clear()


def zero_grads(tensors):
    for t in tensors:
        t.zero_grad()


# ---------------------------------------------------------------------------
# Shape helpers
# ---------------------------------------------------------------------------

def _axis1_view(b_data, ndim):
    """Reshape a 1-D array for broadcasting over axis 1 of an ndim array."""
    return b_data.reshape((1, -1) + (1,) * (ndim - 2))


def _broadcast_mode(a, b, opname):
    """Classify the b operand: 'scalar', 'same', or 'axis1' (1-D over dim 1)."""
    if isinstance(b, (int, float, np.integer, np.floating)):
        return "scalar"
    if not isinstance(b, Tensor):
        raise TensorError(f"{opname}: second operand must be Tensor or scalar")
    if b.shape == a.shape:
        return "same"
    if b.ndim == 1 and a.ndim >= 2 and b.shape[0] == a.shape[1]:
        return "axis1"
    raise TensorError(
        f"{opname}: shape mismatch beyond allowed broadcast: {a.shape} vs {b.shape}"
    )


def _reduce_axis1(g, ndim):
    axes = (0,) + tuple(range(2, ndim))
    return g.sum(axis=axes)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, s in enumerate(shape):
        if s == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

def add(a, b):
    """Elementwise a + b; b may be a scalar or 1-D broadcast over axis 1."""
    mode = _broadcast_mode(a, b, "add")
    if mode == "scalar":
        data = a.data + a.dtype.type(b)
    elif mode == "same":
        data = a.data + b.data
    else:
        data = a.data + _axis1_view(b.data, a.ndim)

    def _backward(g):
        if a.requires_grad:
            a._accumulate_grad(g)
        if mode != "scalar" and b.requires_grad:
            b._accumulate_grad(g if mode == "same" else _reduce_axis1(g, a.ndim))

    inputs = (a,) if mode == "scalar" else (a, b)
    return _make_output(data, inputs, _backward, "add")


def sub(a, b):
    """Elementwise a - b (same-shape tensors or scalar b)."""
    if isinstance(b, (int, float, np.integer, np.floating)):
        return add(a, -float(b))
    if not isinstance(b, Tensor) or b.shape != a.shape:
        raise TensorError(f"sub: shapes must match, got {a.shape} vs {getattr(b, 'shape', None)}")
    data = a.data - b.data

    def _backward(g):
        if a.requires_grad:
            a._accumulate_grad(g)
        if b.requires_grad:
            b._accumulate_grad(-g)

    return _make_output(data, (a, b), _backward, "sub")


def mul(a, b):
    """Elementwise a * b; b may be a scalar or 1-D broadcast over axis 1."""
    mode = _broadcast_mode(a, b, "mul")
    if mode == "scalar":
        data = a.data * a.dtype.type(b)
    elif mode == "same":
        data = a.data * b.data
    else:
        data = a.data * _axis1_view(b.data, a.ndim)

    def _backward(g):
        if mode == "scalar":
            if a.requires_grad:
                a._accumulate_grad(g * a.dtype.type(b))
            return
        bview = b.data if mode == "same" else _axis1_view(b.data, a.ndim)
        if a.requires_grad:
            a._accumulate_grad(g * bview)
        if b.requires_grad:
            gb = g * a.data
            b._accumulate_grad(gb if mode == "same" else _reduce_axis1(gb, a.ndim))

    inputs = (a,) if mode == "scalar" else (a, b)
    return _make_output(data, inputs, _backward, "mul")


def scale(a, s):
    """a * s for a python scalar s."""
    return mul(a, float(s))


def neg(a):
    return mul(a, -1.0)


def abs_(a):
    """Elementwise |a|; subgradient 0 at ties (sign(0) = 0)."""
    data = np.abs(a.data)
    sign = np.sign(a.data)

    def _backward(g):
        if a.requires_grad:
            a._accumulate_grad(g * sign)

    return _make_output(data, (a,), _backward, "abs")


def sum_(a):
    """Sum of all elements, as a scalar tensor."""
    data = np.asarray(a.data.sum(), dtype=a.dtype)

    def _backward(g):
        if a.requires_grad:
            a._accumulate_grad(np.broadcast_to(g, a.shape).astype(a.dtype))

    return _make_output(data, (a,), _backward, "sum")


def mean_(a):
    """Mean of all elements, as a scalar tensor."""
    data = np.asarray(a.data.mean(dtype=a.dtype), dtype=a.dtype)
    inv_n = 1.0 / a.size

    def _backward(g):
        if a.requires_grad:
            a._accumulate_grad(np.broadcast_to(g * a.dtype.type(inv_n), a.shape).astype(a.dtype))

    return _make_output(data, (a,), _backward, "mean")


# ---------------------------------------------------------------------------
# Linear algebra and convolutions
# ---------------------------------------------------------------------------

def matmul(a, b):
    """Matrix product, batched over leading dims."""
    if a.ndim < 2 or b.ndim < 2:
        raise TensorError("matmul operands must be at least 2-D")
    if a.shape[-1] != b.shape[-2]:
        raise TensorError(f"matmul inner dims disagree: {a.shape} vs {b.shape}")
    data = np.matmul(a.data, b.data)

    def _backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            a._accumulate_grad(_unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            b._accumulate_grad(_unbroadcast(gb, b.shape))

    return _make_output(data, (a, b), _backward, "matmul")


def conv_pw(x, w, bias=None):
    """1x1 pointwise convolution: per-pixel channel mixing.

    x: (N, C, H, W), w: (Cout, C), bias: (Cout,) optional.
    """
    if x.ndim != 4:
        raise TensorError(f"conv_pw expects NCHW input, got {x.shape}")
    if w.ndim != 2 or w.shape[0] < 1:
        raise TensorError(f"conv_pw weight must be (Cout, C), got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise TensorError(f"conv_pw channel mismatch: x has {x.shape[1]}, w expects {w.shape[1]}")
    data = np.einsum("oc,nchw->nohw", w.data, x.data, optimize=True)
    if bias is not None:
        data += _axis1_view(bias.data, 4)

    def _backward(g):
        if x.requires_grad:
            x._accumulate_grad(np.einsum("oc,nohw->nchw", w.data, g, optimize=True))
        if w.requires_grad:
            w._accumulate_grad(np.einsum("nohw,nchw->oc", g, x.data, optimize=True))
        if bias is not None and bias.requires_grad:
            bias._accumulate_grad(g.sum(axis=(0, 2, 3)))

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make_output(data, inputs, _backward, "conv_pw")


def conv_dw(x, w, bias=None):
    """Depthwise 3x3 convolution, stride 1, zero padding 1.

    x: (N, C, H, W), w: (C, 3, 3), bias: (C,) optional. Channel i is convolved
    only with kernel i; spatial size is preserved.
    """
    if x.ndim != 4:
        raise TensorError(f"conv_dw expects NCHW input, got {x.shape}")
    if w.shape != (x.shape[1], 3, 3):
        raise TensorError(f"conv_dw kernels must be (C, 3, 3) with C={x.shape[1]}, got {w.shape}")
    data = kernels.dwconv2d(x.data, w.data)
    if bias is not None:
        data += _axis1_view(bias.data, 4)

    def _backward(g):
        if x.requires_grad:
            w_flip = np.ascontiguousarray(w.data[:, ::-1, ::-1])
            x._accumulate_grad(kernels.dwconv2d(g, w_flip))
        if w.requires_grad:
            w._accumulate_grad(kernels.dwconv2d_weight_grad(g, x.data))
        if bias is not None and bias.requires_grad:
            bias._accumulate_grad(g.sum(axis=(0, 2, 3)))

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make_output(data, inputs, _backward, "conv_dw")


def conv3x3(x, w, bias=None):
    """Full 3x3 convolution (cross-channel), stride 1, zero padding 1.

    x: (N, C, H, W), w: (Cout, C, 3, 3). Used for the input embedding, the
    level transitions and the output head.
    """
    if x.ndim != 4:
        raise TensorError(f"conv3x3 expects NCHW input, got {x.shape}")
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise TensorError(f"conv3x3 weight must be (Cout, C, 3, 3), got {w.shape}")
    if w.shape[1] != x.shape[1]:
        raise TensorError(f"conv3x3 channel mismatch: x has {x.shape[1]}, w expects {w.shape[1]}")
    n, c, h, wd = x.shape
    xp = np.zeros((n, c, h + 2, wd + 2), dtype=x.dtype)
    xp[:, :, 1:-1, 1:-1] = x.data
    data = np.zeros((n, w.shape[0], h, wd), dtype=x.dtype)
    for dy in range(3):
        for dx in range(3):
            data += np.einsum(
                "oc,nchw->nohw", w.data[:, :, dy, dx], xp[:, :, dy:dy + h, dx:dx + wd],
                optimize=True,
            )
    if bias is not None:
        data += _axis1_view(bias.data, 4)

    def _backward(g):
        if x.requires_grad:
            gp = np.zeros((n, w.shape[0], h + 2, wd + 2), dtype=x.dtype)
            gp[:, :, 1:-1, 1:-1] = g
            gx = np.zeros_like(x.data)
            for dy in range(3):
                for dx in range(3):
                    # out[i,j] consumed x[i+dy-1, j+dx-1]; invert the shift
                    gx += np.einsum(
                        "oc,nohw->nchw", w.data[:, :, dy, dx],
                        gp[:, :, 2 - dy:2 - dy + h, 2 - dx:2 - dx + wd],
                        optimize=True,
                    )
            x._accumulate_grad(gx)
        if w.requires_grad:
            gw = np.empty_like(w.data)
            for dy in range(3):
                for dx in range(3):
                    gw[:, :, dy, dx] = np.einsum(
                        "nohw,nchw->oc", g, xp[:, :, dy:dy + h, dx:dx + wd],
                        optimize=True,
                    )
            w._accumulate_grad(gw)
        if bias is not None and bias.requires_grad:
            bias._accumulate_grad(g.sum(axis=(0, 2, 3)))

    inputs = (x, w) if bias is None else (x, w, bias)
    return _make_output(data, inputs, _backward, "conv3x3")


def layer_norm(x, weight, bias, eps=1e-5):
    """Normalize over the channel dim per spatial location, then affine.

    x: (N, C, H, W), weight/bias: (C,). Variance is the biased estimator.
    """
    if eps <= 0:
        raise TensorError("layer_norm eps must be > 0")
    if x.ndim != 4 or weight.shape != (x.shape[1],) or bias.shape != (x.shape[1],):
        raise TensorError(f"layer_norm shapes inconsistent: x {x.shape}, weight {weight.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + x.dtype.type(eps))
    y = xc * inv
    data = _axis1_view(weight.data, 4) * y + _axis1_view(bias.data, 4)

    def _backward(g):
        if x.requires_grad:
            gy = g * _axis1_view(weight.data, 4)
            m1 = gy.mean(axis=1, keepdims=True)
            m2 = (gy * y).mean(axis=1, keepdims=True)
            x._accumulate_grad(inv * (gy - m1 - y * m2))
        if weight.requires_grad:
            weight._accumulate_grad((g * y).sum(axis=(0, 2, 3)))
        if bias.requires_grad:
            bias._accumulate_grad(g.sum(axis=(0, 2, 3)))

    return _make_output(data, (x, weight, bias), _backward, "layer_norm")


def gelu(x):
    """Exact (erf-form) Gaussian error linear unit."""
    data = kernels.gelu_fwd(x.data)

    def _backward(g):
        if x.requires_grad:
            x._accumulate_grad(g * kernels.gelu_bwd(x.data))

    return _make_output(data, (x,), _backward, "gelu")


def softmax(x, axis=-1):
    """Stable softmax along one axis; slices sum to 1."""
    if not -x.ndim <= axis < x.ndim:
        raise TensorError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def _backward(g):
        if x.requires_grad:
            inner = (g * s).sum(axis=axis, keepdims=True)
            x._accumulate_grad(s * (g - inner))

    return _make_output(s, (x,), _backward, "softmax")


# ---------------------------------------------------------------------------
# Rearrangement
# ---------------------------------------------------------------------------

def _unshuffle_np(a, r):
    n, c, h, w = a.shape
    out = a.reshape(n, c, h // r, r, w // r, r)
    out = out.transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(out).reshape(n, c * r * r, h // r, w // r)


def _shuffle_np(a, r):
    n, c, h, w = a.shape
    out = a.reshape(n, c // (r * r), r, r, h, w)
    out = out.transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(out).reshape(n, c // (r * r), h * r, w * r)


def pixel_unshuffle(x, r=2):
    """Lossless N,C,H,W -> N,C*r^2,H/r,W/r rearrangement.

    Output channel c*r^2 + dy*r + dx holds source channel c at spatial offset
    (dy, dx) within each r x r block (block-row-major ordering).
    """
    if x.ndim != 4:
        raise TensorError(f"pixel_unshuffle expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % r or w % r:
        raise TensorError(f"spatial dims {h}x{w} not divisible by r={r}")
    data = _unshuffle_np(x.data, r)

    def _backward(g):
        if x.requires_grad:
            x._accumulate_grad(_shuffle_np(g, r))

    return _make_output(data, (x,), _backward, "pixel_unshuffle")


def pixel_shuffle(x, r=2):
    """Inverse of pixel_unshuffle: N,C,H,W -> N,C/r^2,H*r,W*r."""
    if x.ndim != 4:
        raise TensorError(f"pixel_shuffle expects NCHW, got {x.shape}")
    if x.shape[1] % (r * r):
        raise TensorError(f"channels {x.shape[1]} not divisible by r^2={r * r}")
    data = _shuffle_np(x.data, r)

    def _backward(g):
        if x.requires_grad:
            x._accumulate_grad(_unshuffle_np(g, r))

    return _make_output(data, (x,), _backward, "pixel_shuffle")


def fft2_magnitude(x):
    """Per-channel 2-D DFT magnitude |F(x)| over the last two axes.

    Unnormalized forward transform. Differentiable through the real and
    imaginary parts, with subgradient 0 where the magnitude is exactly 0.
    """
    f = np.fft.fft2(x.data, axes=(-2, -1))
    mag = np.abs(f).astype(x.dtype)

    def _backward(g):
        if x.requires_grad:
            safe = np.where(mag > 0, mag, 1).astype(x.dtype)
            cr = np.where(mag > 0, f.real / safe, 0.0)
            ci = np.where(mag > 0, f.imag / safe, 0.0)
            spectral = g * cr + 1j * (g * ci)
            hw = x.shape[-2] * x.shape[-1]
            gx = np.fft.ifft2(spectral, axes=(-2, -1)).real * hw
            x._accumulate_grad(gx.astype(x.dtype))

    return _make_output(mag, (x,), _backward, "fft2_magnitude")


def concat(tensors, axis=1):
    """Concatenate along an axis (used for the skip connections)."""
    if not tensors:
        raise TensorError("concat of nothing")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def _backward(g):
        for t, start, stop in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(start, stop)
                t._accumulate_grad(np.ascontiguousarray(g[tuple(idx)]))

    return _make_output(data, tuple(tensors), _backward, "concat")


def narrow(x, axis, start, length):
    """Slice [start, start+length) along one axis."""
    if start < 0 or start + length > x.shape[axis]:
        raise TensorError(f"narrow [{start}:{start + length}) out of range for {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, start + length)
    data = np.ascontiguousarray(x.data[tuple(idx)])

    def _backward(g):
        if x.requires_grad:
            gx = np.zeros_like(x.data)
            gx[tuple(idx)] = g
            x._accumulate_grad(gx)

    return _make_output(data, (x,), _backward, "narrow")


def split(x, parts, axis=1):
    """Split into `parts` equal chunks along an axis."""
    if x.shape[axis] % parts:
        raise TensorError(f"cannot split {x.shape[axis]} channels into {parts} parts")
    step = x.shape[axis] // parts
    return [narrow(x, axis, i * step, step) for i in range(parts)]


def reshape(x, shape):
    data = x.data.reshape(shape)

    def _backward(g):
        if x.requires_grad:
            x._accumulate_grad(g.reshape(x.shape))

    return _make_output(data, (x,), _backward, "reshape")


def transpose(x, axes):
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    data = np.ascontiguousarray(x.data.transpose(axes))

    def _backward(g):
        if x.requires_grad:
            x._accumulate_grad(np.ascontiguousarray(g.transpose(inverse)))

    return _make_output(data, (x,), _backward, "transpose")
