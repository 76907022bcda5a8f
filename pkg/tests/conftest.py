"""Shared fixtures and independent oracles for the test suite."""

import os

os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

import numpy as np
import pytest

from deblur import blocks as B
from deblur import tensor as T


@pytest.fixture(autouse=True)
def _fresh_tape():
    T.reset_tape()
    yield
    T.reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def numeric_grad(f, tensor, h=1e-5):
    """Central finite differences of scalar f() w.r.t. one tensor's elements."""
    num = np.zeros_like(tensor.data)
    flat = tensor.data.ravel()
    out = num.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return num


def assert_grads_close(analytic, numeric, tol):
    """Elementwise |a - n| / max(|a| + |n|, 1) < tol."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.abs(analytic) + np.abs(numeric), 1.0)
    rel = np.abs(analytic - numeric) / denom
    assert rel.max() < tol, f"gradient mismatch: worst rel err {rel.max():.3e} >= {tol}"


def check_op_gradients(op, tensors, tol=1e-4, h=1e-5, rng=None):
    """Finite-difference check of `op(*tensors)` w.r.t. every requires_grad input.

    Projects the op output onto a fixed random vector to get a scalar loss.
    """
    rng = rng or np.random.default_rng(0)
    probe = None

    def run():
        nonlocal probe
        out = op(*tensors)
        if probe is None:
            probe = T.Tensor(rng.standard_normal(out.shape), dtype=np.float64)
        loss = T.sum_(T.mul(out, probe))
        return loss

    for t in tensors:
        if isinstance(t, T.Tensor):
            t.zero_grad()
    loss = run()
    T.backward(loss)
    analytic = {id(t): (None if t.grad is None else t.grad.copy()) for t in tensors}

    def scalar():
        val = run().item()
        T.reset_tape()
        return val

    for t in tensors:
        if not (isinstance(t, T.Tensor) and t.requires_grad):
            continue
        num = numeric_grad(scalar, t, h=h)
        assert analytic[id(t)] is not None, "analytic gradient missing"
        assert_grads_close(analytic[id(t)], num, tol)


# ---------------------------------------------------------------------------
# Independent oracles
# ---------------------------------------------------------------------------

def naive_dft2_magnitude(x):
    """O(N^2) direct 2-D DFT magnitude over the last two axes (float64)."""
    x = np.asarray(x, dtype=np.float64)
    *lead, h, w = x.shape
    x2 = x.reshape(-1, h, w)
    out = np.zeros_like(x2)
    for b in range(x2.shape[0]):
        for u in range(h):
            for v in range(w):
                re = im = 0.0
                for i in range(h):
                    for j in range(w):
                        ang = -2.0 * np.pi * (u * i / h + v * j / w)
                        re += x2[b, i, j] * np.cos(ang)
                        im += x2[b, i, j] * np.sin(ang)
                out[b, u, v] = np.hypot(re, im)
    return out.reshape(*lead, h, w)


def naive_windowed_ssim(ref, test, size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Sliding-window SSIM with an explicit 2-D Gaussian window and loops."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    k = np.arange(size) - (size - 1) / 2.0
    w1 = np.exp(-(k * k) / (2 * sigma * sigma))
    win = np.outer(w1, w1)
    win /= win.sum()
    c1, c2 = k1 * k1, k2 * k2
    h, w = ref.shape
    vals = []
    for i in range(h - size + 1):
        for j in range(w - size + 1):
            a = ref[i:i + size, j:j + size]
            b = test[i:i + size, j:j + size]
            mu_a = (win * a).sum()
            mu_b = (win * b).sum()
            va = (win * a * a).sum() - mu_a * mu_a
            vb = (win * b * b).sum() - mu_b * mu_b
            cov = (win * a * b).sum() - mu_a * mu_b
            vals.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                        / ((mu_a ** 2 + mu_b ** 2 + c1) * (va + vb + c2)))
    return float(np.mean(vals))


# ---------------------------------------------------------------------------
# Block construction
# ---------------------------------------------------------------------------

def random_block_params(rng, channels=4, heads=2, gamma=2.66, dtype=np.float64,
                        scale=0.3):
    """A BlockParams with random weights for gradient/oracle tests."""
    hidden = B.ffn_hidden_width(channels, gamma)
    c = channels

    def t(shape):
        return T.Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=dtype)

    return B.BlockParams(
        norm1_w=t((c,)), norm1_b=t((c,)),
        attn=B.ChannelAttentionParams(
            qkv_pw_w=t((3 * c, c)), qkv_pw_b=t((3 * c,)),
            qkv_dw_w=t((3 * c, 3, 3)), qkv_dw_b=t((3 * c,)),
            out_pw_w=t((c, c)), out_pw_b=t((c,)),
            alpha=t((heads,)), heads=heads,
        ),
        norm2_w=t((c,)), norm2_b=t((c,)),
        ffn=B.GatedFeedForwardParams(
            expand_pw_w=t((2 * hidden, c)), expand_pw_b=t((2 * hidden,)),
            dw_w=t((2 * hidden, 3, 3)), dw_b=t((2 * hidden,)),
            project_pw_w=t((c, hidden)), project_pw_b=t((c,)),
            hidden=hidden,
        ),
    )


def iter_block_tensors(p):
    """(name, Tensor) for every learnable in a BlockParams."""
    yield "norm1_w", p.norm1_w
    yield "norm1_b", p.norm1_b
    for f in ("qkv_pw_w", "qkv_pw_b", "qkv_dw_w", "qkv_dw_b",
              "out_pw_w", "out_pw_b", "alpha"):
        yield f"attn.{f}", getattr(p.attn, f)
    yield "norm2_w", p.norm2_w
    yield "norm2_b", p.norm2_b
    for f in ("expand_pw_w", "expand_pw_b", "dw_w", "dw_b",
              "project_pw_w", "project_pw_b"):
        yield f"ffn.{f}", getattr(p.ffn, f)
