"""Paired training-time augmentation.

Geometric transforms (flips, perspective) and photometric transforms
(brightness/contrast/saturation/hue jitter, Gaussian blur) are always applied
with identical parameters to both images of a blurred/sharp pair, so the
supervision target keeps matching the input. Everything is a pure function of
(pair, config, rng state).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class AugmentConfig:
    p_hflip: float = 0.5
    p_vflip: float = 0.5
    p_extra: float = 0.3          # probability of each extra transform stage
    brightness: float = 0.2       # multiplicative jitter range +-
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05             # hue rotation range +- (fraction of the hue circle)
    blur_sigma_min: float = 0.1
    blur_sigma_max: float = 1.0
    blur_kernel: int = 5
    perspective_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for p in (self.p_hflip, self.p_vflip, self.p_extra):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probabilities must be in [0, 1], got {p}")
        if self.blur_sigma_min < 0 or self.blur_sigma_max < self.blur_sigma_min:
            raise ValueError("blur sigma range invalid")
        if self.blur_kernel % 2 == 0 or self.blur_kernel < 1:
            raise ValueError("blur kernel size must be odd and >= 1")


IDENTITY_AUGMENT = AugmentConfig(
    p_hflip=0.0, p_vflip=0.0, p_extra=0.0,
    brightness=0.0, contrast=0.0, saturation=0.0, hue=0.0,
    blur_sigma_min=0.0, blur_sigma_max=0.0, perspective_scale=0.0,
)


def rng_for_sample(master_seed, sample_index):
    """Derived per-sample generator; stable across runs and parallel order."""
    return np.random.default_rng(np.random.SeedSequence((master_seed, sample_index)))


def gaussian_kernel(sigma, size):
    """Normalized 1-D Gaussian; degenerates to a delta as sigma -> 0."""
    if size % 2 == 0 or size < 1:
        raise ValueError(f"kernel size must be odd and >= 1, got {size}")
    k = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    if sigma < 1e-8:
        w = (k == 0).astype(np.float64)
    else:
        w = np.exp(-(k * k) / (2.0 * sigma * sigma))
    return w / w.sum()


def gaussian_blur(img, sigma, size):
    """Separable Gaussian blur with reflect padding, per channel."""
    w = gaussian_kernel(sigma, size).astype(img.dtype)
    half = size // 2
    if half == 0:
        return img.copy()
    from numpy.lib.stride_tricks import sliding_window_view

    out = np.pad(img, ((0, 0), (half, half), (0, 0)), mode="reflect")
    out = sliding_window_view(out, size, axis=1) @ w
    out = np.pad(out, ((0, 0), (0, 0), (half, half)), mode="reflect")
    out = sliding_window_view(out, size, axis=2) @ w
    return out.astype(img.dtype)


# ---------------------------------------------------------------------------
# Photometric jitter
# ---------------------------------------------------------------------------

def _rgb_to_hsv(img):
    r, g, b = img[0], img[1], img[2]
    maxc = np.max(img, axis=0)
    minc = np.min(img, axis=0)
    v = maxc
    spread = maxc - minc
    s = np.where(maxc > 0, spread / np.where(maxc > 0, maxc, 1), 0.0)
    safe = np.where(spread > 0, spread, 1)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(spread > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v])


def _hsv_to_rgb(hsv):
    h, s, v = hsv[0], hsv[1], hsv[2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    i = i.astype(np.int64) % 6
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b])


def adjust_brightness(img, factor):
    return np.clip(img * factor, 0.0, 1.0)


def adjust_contrast(img, factor):
    gray_mean = (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]).mean()
    return np.clip((img - gray_mean) * factor + gray_mean, 0.0, 1.0)


def adjust_saturation(img, factor):
    gray = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return np.clip(gray[None] + (img - gray[None]) * factor, 0.0, 1.0)


def adjust_hue(img, shift):
    hsv = _rgb_to_hsv(np.clip(img, 0.0, 1.0))
    hsv[0] = (hsv[0] + shift) % 1.0
    return np.clip(_hsv_to_rgb(hsv), 0.0, 1.0)


# ---------------------------------------------------------------------------
# Perspective warp
# ---------------------------------------------------------------------------

def _homography_from_corners(src, dst):
    """Solve the 8-dof homography mapping src corners to dst corners."""
    a = np.zeros((8, 8))
    rhs = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        rhs[2 * i] = u
        rhs[2 * i + 1] = v
    try:
        h = np.linalg.solve(a, rhs)
    except np.linalg.LinAlgError as exc:
        raise ValueError("degenerate corner placement: homography not invertible") from exc
    return np.append(h, 1.0).reshape(3, 3)


def perspective(img, corner_offsets):
    """Warp so the four image corners move by `corner_offsets`.

    corner_offsets: (4, 2) array of (dx, dy) for corners ordered top-left,
    top-right, bottom-right, bottom-left, in pixels. Bilinear sampling with
    edge replication outside the source; zero offsets are the exact identity.
    """
    c, h, w = img.shape
    offsets = np.asarray(corner_offsets, dtype=np.float64).reshape(4, 2)
    corners = np.array([[0, 0], [w - 1, 0], [w - 1, h - 1], [0, h - 1]], dtype=np.float64)
    forward = _homography_from_corners(corners, corners + offsets)
    inv = np.linalg.inv(forward)

    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    denom = inv[2, 0] * xs + inv[2, 1] * ys + inv[2, 2]
    if np.any(np.abs(denom) < 1e-12):
        raise ValueError("degenerate corner placement: homography not invertible")
    sx = (inv[0, 0] * xs + inv[0, 1] * ys + inv[0, 2]) / denom
    sy = (inv[1, 0] * xs + inv[1, 1] * ys + inv[1, 2]) / denom

    # snap to the integer grid so identity/translation maps stay exact despite
    # solve() rounding noise
    rx, ry = np.round(sx), np.round(sy)
    sx = np.where(np.abs(sx - rx) < 1e-9, rx, sx)
    sy = np.where(np.abs(sy - ry) < 1e-9, ry, sy)

    sx = np.clip(sx, 0.0, w - 1.0)
    sy = np.clip(sy, 0.0, h - 1.0)
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (sx - x0).astype(img.dtype)
    fy = (sy - y0).astype(img.dtype)

    out = np.empty_like(img)
    for ch in range(c):
        plane = img[ch]
        top = plane[y0, x0] * (1 - fx) + plane[y0, x1] * fx
        bot = plane[y1, x0] * (1 - fx) + plane[y1, x1] * fx
        out[ch] = top * (1 - fy) + bot * fy
    return out


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------

def apply(pair, cfg, rng):
    """Augment one (blurred, sharp) pair. rng: np.random.Generator or int seed.

    Geometric transforms hit both images identically; photometric transforms
    use one shared parameter draw for both. Deterministic given the rng state.
    """
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    blur_img, sharp_img = pair
    if blur_img.shape != sharp_img.shape:
        raise ValueError(f"pair shapes differ: {blur_img.shape} vs {sharp_img.shape}")
    imgs = [np.asarray(blur_img), np.asarray(sharp_img)]

    if rng.random() < cfg.p_hflip:
        imgs = [np.ascontiguousarray(im[:, :, ::-1]) for im in imgs]
    if rng.random() < cfg.p_vflip:
        imgs = [np.ascontiguousarray(im[:, ::-1, :]) for im in imgs]
    if cfg.perspective_scale > 0 and rng.random() < cfg.p_extra:
        _, h, w = imgs[0].shape
        lim = cfg.perspective_scale * np.array([w, h], dtype=np.float64)
        offsets = rng.uniform(-lim, lim, size=(4, 2))
        imgs = [perspective(im, offsets) for im in imgs]

    if rng.random() < cfg.p_extra:
        fb = 1.0 + rng.uniform(-cfg.brightness, cfg.brightness)
        fc = 1.0 + rng.uniform(-cfg.contrast, cfg.contrast)
        fs = 1.0 + rng.uniform(-cfg.saturation, cfg.saturation)
        fh = rng.uniform(-cfg.hue, cfg.hue)
        imgs = [adjust_brightness(im, fb) for im in imgs]
        imgs = [adjust_contrast(im, fc) for im in imgs]
        imgs = [adjust_saturation(im, fs) for im in imgs]
        if cfg.hue > 0:
            imgs = [adjust_hue(im, fh) for im in imgs]
    if cfg.blur_sigma_max > 0 and rng.random() < cfg.p_extra:
        sigma = rng.uniform(cfg.blur_sigma_min, cfg.blur_sigma_max)
        imgs = [gaussian_blur(im, sigma, cfg.blur_kernel) for im in imgs]

    return imgs[0], imgs[1]
