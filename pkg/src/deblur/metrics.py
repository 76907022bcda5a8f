"""Full-reference quality metrics and hard-example mining.

PSNR and SSIM operate on the BT.601 full-range luma channel; the color
difference metric converts through linearized sRGB -> XYZ (D65) -> Lab and
evaluates the full CIEDE2000 formula (kL = kC = kH = 1) including the a'
chroma correction, hue wraparound, and the rotation term.

Identical images give infinite PSNR; the sentinel is excluded from aggregate
means and counted separately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

HARD_NEGATIVE_DB = 20.0
HARD_POSITIVE_DB = 30.0

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def rgb_to_y(img):
    """BT.601 full-range luma of a (3, H, W) image in [0, 1]."""
    img = np.clip(img, 0.0, 1.0)
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def _to_luma(img):
    a = np.asarray(img, dtype=np.float64)
    if a.ndim == 3 and a.shape[0] == 3:
        return rgb_to_y(a)
    if a.ndim == 2:
        return a
    raise ValueError(f"expected (3, H, W) or (H, W) image, got {a.shape}")


def psnr(ref, test, max_val=1.0):
    """Peak signal-to-noise ratio in dB on the luma channel.

    Returns math.inf for identical images.
    """
    r, t = _to_luma(ref), _to_luma(test)
    if r.shape != t.shape:
        raise ValueError(f"psnr shapes differ: {r.shape} vs {t.shape}")
    mse = np.mean((r - t) ** 2)
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val * max_val / mse)


def gaussian_window(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    """Normalized 1-D Gaussian window."""
    k = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    w = np.exp(-(k * k) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(img, w1d):
    """Separable valid-mode filtering with a 1-D window along both axes."""
    from numpy.lib.stride_tricks import sliding_window_view

    out = sliding_window_view(img, len(w1d), axis=0) @ w1d
    out = sliding_window_view(out, len(w1d), axis=1) @ w1d
    return out


def ssim(ref, test):
    """Mean local SSIM on luma with an 11x11 Gaussian window (sigma 1.5)."""
    r, t = _to_luma(ref), _to_luma(test)
    if r.shape != t.shape:
        raise ValueError(f"ssim shapes differ: {r.shape} vs {t.shape}")
    if min(r.shape) < SSIM_WINDOW:
        raise ValueError(f"image {r.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    w = gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2

    mu_r = _filter_valid(r, w)
    mu_t = _filter_valid(t, w)
    var_r = _filter_valid(r * r, w) - mu_r * mu_r
    var_t = _filter_valid(t * t, w) - mu_t * mu_t
    cov = _filter_valid(r * t, w) - mu_r * mu_t

    num = (2 * mu_r * mu_t + c1) * (2 * cov + c2)
    den = (mu_r * mu_r + mu_t * mu_t + c1) * (var_r + var_t + c2)
    return float(np.mean(num / den))


def mae(ref, test):
    """Mean absolute error over all channels and pixels."""
    r = np.asarray(ref, dtype=np.float64)
    t = np.asarray(test, dtype=np.float64)
    if r.shape != t.shape:
        raise ValueError(f"mae shapes differ: {r.shape} vs {t.shape}")
    return float(np.mean(np.abs(r - t)))


# ---------------------------------------------------------------------------
# Color difference
# ---------------------------------------------------------------------------

# sRGB -> XYZ (D65) matrix and reference white
_SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
_D65 = np.array([0.95047, 1.0, 1.08883])


def srgb_to_lab(img):
    """(3, H, W) sRGB in [0, 1] -> (3, H, W) CIE Lab (D65)."""
    rgb = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    lin = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    xyz = np.einsum("ij,jhw->ihw", _SRGB_TO_XYZ, lin)
    xyz = xyz / _D65[:, None, None]
    eps, kappa = 216.0 / 24389.0, 24389.0 / 27.0
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16.0) / 116.0)
    lab = np.empty_like(xyz)
    lab[0] = 116.0 * f[1] - 16.0
    lab[1] = 500.0 * (f[0] - f[1])
    lab[2] = 200.0 * (f[1] - f[2])
    return lab


def ciede2000_lab(lab1, lab2):
    """CIEDE2000 between Lab arrays of shape (3, ...), kL = kC = kH = 1."""
    l1, a1, b1 = (np.asarray(x, dtype=np.float64) for x in lab1)
    l2, a2, b2 = (np.asarray(x, dtype=np.float64) for x in lab2)
    pow25_7 = 25.0 ** 7

    c1 = np.hypot(a1, b1)
    c2 = np.hypot(a2, b2)
    c_bar = 0.5 * (c1 + c2)
    g = 0.5 * (1.0 - np.sqrt(c_bar ** 7 / (c_bar ** 7 + pow25_7)))
    a1p = (1.0 + g) * a1
    a2p = (1.0 + g) * a2
    c1p = np.hypot(a1p, b1)
    c2p = np.hypot(a2p, b2)

    h1p = np.degrees(np.arctan2(b1, a1p)) % 360.0
    h1p = np.where((a1p == 0) & (b1 == 0), 0.0, h1p)
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360.0
    h2p = np.where((a2p == 0) & (b2 == 0), 0.0, h2p)

    dl = l2 - l1
    dc = c2p - c1p
    zero_chroma = (c1p * c2p) == 0
    dh_raw = h2p - h1p
    dh = np.where(dh_raw > 180.0, dh_raw - 360.0, dh_raw)
    dh = np.where(dh_raw < -180.0, dh_raw + 360.0, dh)
    dh = np.where(zero_chroma, 0.0, dh)
    dbig_h = 2.0 * np.sqrt(c1p * c2p) * np.sin(np.radians(dh) / 2.0)

    l_bar = 0.5 * (l1 + l2)
    cp_bar = 0.5 * (c1p + c2p)
    h_sum = h1p + h2p
    h_diff = np.abs(h1p - h2p)
    h_bar = np.where(h_diff <= 180.0, 0.5 * h_sum,
                     np.where(h_sum < 360.0, 0.5 * (h_sum + 360.0), 0.5 * (h_sum - 360.0)))
    h_bar = np.where(zero_chroma, h_sum, h_bar)

    t = (1.0
         - 0.17 * np.cos(np.radians(h_bar - 30.0))
         + 0.24 * np.cos(np.radians(2.0 * h_bar))
         + 0.32 * np.cos(np.radians(3.0 * h_bar + 6.0))
         - 0.20 * np.cos(np.radians(4.0 * h_bar - 63.0)))
    d_theta = 30.0 * np.exp(-(((h_bar - 275.0) / 25.0) ** 2))
    r_c = 2.0 * np.sqrt(cp_bar ** 7 / (cp_bar ** 7 + pow25_7))
    r_t = -np.sin(np.radians(2.0 * d_theta)) * r_c

    lm50 = (l_bar - 50.0) ** 2
    s_l = 1.0 + 0.015 * lm50 / np.sqrt(20.0 + lm50)
    s_c = 1.0 + 0.045 * cp_bar
    s_h = 1.0 + 0.015 * cp_bar * t

    f_l = dl / s_l
    f_c = dc / s_c
    f_h = dbig_h / s_h
    return np.sqrt(f_l ** 2 + f_c ** 2 + f_h ** 2 + r_t * f_c * f_h)


def delta_e2000(img1, img2):
    """Mean CIEDE2000 over pixels of two (3, H, W) sRGB images in [0, 1]."""
    a1 = np.asarray(img1, dtype=np.float64)
    a2 = np.asarray(img2, dtype=np.float64)
    if a1.shape != a2.shape:
        raise ValueError(f"delta_e2000 shapes differ: {a1.shape} vs {a2.shape}")
    return float(np.mean(ciede2000_lab(srgb_to_lab(a1), srgb_to_lab(a2))))


# ---------------------------------------------------------------------------
# Reports and mining
# ---------------------------------------------------------------------------

@dataclass
class ImageRecord:
    id: str
    psnr_db: float
    ssim: float
    mae: float
    delta_e00: float
    label: str = "neither"


@dataclass
class MetricReport:
    records: list = field(default_factory=list)
    lo_db: float = HARD_NEGATIVE_DB
    hi_db: float = HARD_POSITIVE_DB

    @property
    def count(self):
        return len(self.records)

    def label_counts(self):
        counts = {"hard_positive": 0, "hard_negative": 0, "neither": 0}
        for r in self.records:
            counts[r.label] += 1
        return counts

    def inf_psnr_count(self):
        return sum(1 for r in self.records if math.isinf(r.psnr_db))

    def aggregates(self):
        """Means per metric; infinite PSNRs are excluded from the PSNR mean."""
        finite = [r.psnr_db for r in self.records if math.isfinite(r.psnr_db)]
        def _mean(vals):
            return float(np.mean(vals)) if vals else math.nan
        return {
            "psnr": _mean(finite),
            "ssim": _mean([r.ssim for r in self.records]),
            "mae": _mean([r.mae for r in self.records]),
            "delta_e00": _mean([r.delta_e00 for r in self.records]),
        }

    def to_csv(self):
        lines = ["id,psnr,ssim,mae,deltaE00,label"]
        for r in self.records:
            p = "inf" if math.isinf(r.psnr_db) else f"{r.psnr_db:.6f}"
            lines.append(f"{r.id},{p},{r.ssim:.6f},{r.mae:.6f},{r.delta_e00:.6f},{r.label}")
        return "\n".join(lines) + "\n"

    def summary_table(self):
        agg = self.aggregates()
        counts = self.label_counts()
        rows = [
            ("images", str(self.count)),
            ("psnr_mean_db", f"{agg['psnr']:.4f}"),
            ("psnr_inf_count", str(self.inf_psnr_count())),
            ("ssim_mean", f"{agg['ssim']:.4f}"),
            ("mae_mean", f"{agg['mae']:.6f}"),
            ("lpips_mean", "NA"),
            ("deltaE00_mean", f"{agg['delta_e00']:.4f}"),
            ("hard_positives", str(counts["hard_positive"])),
            ("hard_negatives", str(counts["hard_negative"])),
        ]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows) + "\n"


def evaluate_pair(pair_id, restored, reference):
    """All metrics for one restored/reference image pair."""
    return ImageRecord(
        id=pair_id,
        psnr_db=psnr(reference, restored),
        ssim=ssim(reference, restored),
        mae=mae(reference, restored),
        delta_e00=delta_e2000(reference, restored),
    )


def mine_hard(records, lo=HARD_NEGATIVE_DB, hi=HARD_POSITIVE_DB):
    """Label records by PSNR band: < lo is hard_negative, > hi hard_positive."""
    if lo >= hi:
        raise ValueError(f"lo ({lo}) must be < hi ({hi})")
    report = MetricReport(lo_db=lo, hi_db=hi)
    for r in records:
        if r.psnr_db < lo:
            label = "hard_negative"
        elif r.psnr_db > hi:
            label = "hard_positive"
        else:
            label = "neither"
        report.records.append(ImageRecord(r.id, r.psnr_db, r.ssim, r.mae, r.delta_e00, label))
    return report
