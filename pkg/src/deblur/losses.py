"""Pixel L1 loss, DFT-magnitude loss, and their weighted sum.

The frequency term reduces with a mean over channels and bins (not a sum), so
the default weight 0.1 keeps the two terms on comparable scales at any patch
size. Both terms average over the batch.
"""

from __future__ import annotations

from dataclasses import dataclass

from .tensor import TensorError, abs_, add, fft2_magnitude, mean_, mul, sub


@dataclass(frozen=True)
class LossConfig:
    lambda_freq: float = 0.1

    def __post_init__(self):
        if not (self.lambda_freq >= 0 and self.lambda_freq == self.lambda_freq):
            raise ValueError(f"lambda_freq must be finite and >= 0, got {self.lambda_freq}")


def l1_loss(pred, target):
    """Mean absolute difference over all elements (subgradient 0 at ties)."""
    if pred.shape != target.shape:
        raise TensorError(f"l1_loss shapes differ: {pred.shape} vs {target.shape}")
    return mean_(abs_(sub(pred, target)))


def freq_loss(pred, target):
    """Mean absolute difference of unnormalized 2-D DFT magnitudes."""
    if pred.shape != target.shape:
        raise TensorError(f"freq_loss shapes differ: {pred.shape} vs {target.shape}")
    return mean_(abs_(sub(fft2_magnitude(pred), fft2_magnitude(target))))


def total_loss(pred, target, cfg=LossConfig()):
    """l1 + lambda * freq, with no hidden normalization."""
    pixel = l1_loss(pred, target)
    if cfg.lambda_freq == 0:
        return pixel
    return add(pixel, mul(freq_loss(pred, target), cfg.lambda_freq))
