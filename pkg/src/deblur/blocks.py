"""Channel-attention transformer blocks and the level-transition resamplers.

The attention block computes a per-head cross-covariance map across channels,
so its attention buffer is (heads, C/heads, C/heads) regardless of spatial
size. The gated feed-forward block modulates a linear branch with a
GELU-activated one, both after a shared depthwise convolution.

Orientation convention for the attention map A (per head, c = C/heads):
A[i, j] = softmax_j(alpha * q_i . k_j), out_channel_i = sum_j A[i, j] * v_j.
The softmax axis is the axis contracted against the values.
"""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import (
    Tensor,
    TensorError,
    add,
    conv_dw,
    conv_pw,
    conv3x3,
    gelu,
    layer_norm,
    matmul,
    mul,
    pixel_shuffle,
    pixel_unshuffle,
    reshape,
    softmax,
    split,
    transpose,
)

LN_EPS = 1e-5


@dataclass
class ChannelAttentionParams:
    """Parameters of one transposed-attention module at width C."""

    qkv_pw_w: Tensor   # (3C, C)
    qkv_pw_b: Tensor   # (3C,)
    qkv_dw_w: Tensor   # (3C, 3, 3)
    qkv_dw_b: Tensor   # (3C,)
    out_pw_w: Tensor   # (C, C)
    out_pw_b: Tensor   # (C,)
    alpha: Tensor      # (heads,) learnable temperature, init 1/sqrt(C/heads)
    heads: int


@dataclass
class GatedFeedForwardParams:
    """Parameters of one gated feed-forward module at width C."""

    expand_pw_w: Tensor   # (2*hidden, C)
    expand_pw_b: Tensor   # (2*hidden,)
    dw_w: Tensor          # (2*hidden, 3, 3)
    dw_b: Tensor          # (2*hidden,)
    project_pw_w: Tensor  # (C, hidden)
    project_pw_b: Tensor  # (C,)
    hidden: int


@dataclass
class BlockParams:
    norm1_w: Tensor
    norm1_b: Tensor
    attn: ChannelAttentionParams
    norm2_w: Tensor
    norm2_b: Tensor
    ffn: GatedFeedForwardParams


def ffn_hidden_width(channels, gamma):
    """Hidden width of the gated feed-forward: floor(gamma * C), >= 1."""
    hidden = int(gamma * channels)
    if hidden < 1:
        raise ValueError(f"gamma={gamma} with C={channels} gives hidden={hidden} < 1")
    return hidden


def channel_attention_core(x, p, return_attn=False):
    """Attention path without the residual. x: (N, C, H, W)."""
    n, c, h, w = x.shape
    heads = p.heads
    if c % heads:
        raise TensorError(f"heads={heads} does not divide channels={c}")
    ch = c // heads

    qkv = conv_pw(x, p.qkv_pw_w, p.qkv_pw_b)
    qkv = conv_dw(qkv, p.qkv_dw_w, p.qkv_dw_b)
    q, k, v = split(qkv, 3, axis=1)
    q = reshape(q, (n, heads, ch, h * w))
    k = reshape(k, (n, heads, ch, h * w))
    v = reshape(v, (n, heads, ch, h * w))

    # (N, heads, c, c) cross-covariance map; never HW x HW
    attn = matmul(q, transpose(k, (0, 1, 3, 2)))
    attn = mul(attn, p.alpha)
    attn = softmax(attn, axis=-1)

    out = matmul(attn, v)
    out = reshape(out, (n, c, h, w))
    out = conv_pw(out, p.out_pw_w, p.out_pw_b)
    if return_attn:
        return out, attn
    return out


def channel_attention_forward(x, p):
    """x + attention(x). Zeroing the output projection yields the identity."""
    return add(x, channel_attention_core(x, p))


def gated_ffn_core(x, p):
    """Gated feed-forward path without the residual."""
    h2 = conv_pw(x, p.expand_pw_w, p.expand_pw_b)
    h2 = conv_dw(h2, p.dw_w, p.dw_b)
    gate, lin = split(h2, 2, axis=1)
    gated = mul(gelu(gate), lin)
    return conv_pw(gated, p.project_pw_w, p.project_pw_b)


def gated_ffn_forward(x, p):
    """x + gating(x). Zeroing the linear branch yields the identity."""
    return add(x, gated_ffn_core(x, p))


def block_forward(x, p):
    """Pre-norm residual composition of the two modules."""
    x1 = add(x, channel_attention_core(layer_norm(x, p.norm1_w, p.norm1_b, LN_EPS), p.attn))
    return add(x1, gated_ffn_core(layer_norm(x1, p.norm2_w, p.norm2_b, LN_EPS), p.ffn))


def downsample(x, conv_w):
    """Half the spatial size, double the channels.

    3x3 conv C -> C/2 (bias-free), then pixel_unshuffle(2): net C -> 2C.
    """
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise TensorError(f"downsample needs even spatial dims, got {x.shape}")
    return pixel_unshuffle(conv3x3(x, conv_w), 2)


def upsample(x, conv_w):
    """Double the spatial size, half the channels.

    3x3 conv C -> 2C (bias-free), then pixel_shuffle(2): net C -> C/2.
    """
    if x.shape[1] % 2:
        raise TensorError(f"upsample needs even channel count, got {x.shape}")
    return pixel_shuffle(conv3x3(x, conv_w), 2)
