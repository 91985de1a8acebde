"""MSE / PSNR / SSIM with optional background masking.

Arrays are (H, W) or channel-first (C, H, W). A mask is (H, W) with 1 on the
edited subject; masked metrics are computed over the ``mask == 0``
background.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

WIN = 11
WIN_SIGMA = 1.5


@dataclass
class MetricReport:
    mse: float
    psnr_db: float
    ssim: float
    masked: bool
    pixel_count: int

    @property
    def psnr_infinite(self) -> bool:
        return math.isinf(self.psnr_db)

    def to_dict(self) -> dict:
        return {
            "mse": self.mse,
            "psnr_db": None if self.psnr_infinite else self.psnr_db,
            "psnr_infinite": self.psnr_infinite,
            "ssim": self.ssim,
            "masked": self.masked,
            "pixel_count": self.pixel_count,
            # need pretrained networks; kept so report tables have stable keys
            "lpips": None,
            "clip_similarity": None,
        }


def _prep(a, b, mask):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    if a.ndim != 3:
        raise ValueError("expected (H, W) or (C, H, W) arrays")
    if mask is None:
        keep = np.ones(a.shape[1:], dtype=bool)
    else:
        mask = np.asarray(mask)
        if mask.shape != a.shape[1:]:
            raise ValueError(f"mask shape {mask.shape} does not match {a.shape[1:]}")
        keep = mask == 0
    return a, b, keep


def mse(a, b, mask=None) -> float:
    a, b, keep = _prep(a, b, mask)
    if not keep.any():
        raise ValueError("no pixels in the evaluated region")
    d = (a - b)[:, keep]
    return float(np.mean(d * d))


def psnr_from_mse(m: float, peak: float = 1.0) -> float:
    if m == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / m)


def psnr(a, b, peak: float = 1.0, mask=None) -> float:
    return psnr_from_mse(mse(a, b, mask), peak)


def gaussian_window(size: int = WIN, sigma: float = WIN_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def _filter_valid(x, w):
    # x: (C, H, W) -> (C, H-k+1, W-k+1)
    win = sliding_window_view(x, w.shape, axis=(1, 2))
    return np.einsum("chwij,ij->chw", win, w)


def ssim(a, b, peak: float = 1.0, mask=None) -> float:
    """Single-scale SSIM averaged over every 11x11 window lying fully in the
    evaluated region (and over channels)."""
    a, b, keep = _prep(a, b, mask)
    _, H, W = a.shape
    if H < WIN or W < WIN:
        raise ValueError(f"image {H}x{W} smaller than the {WIN}x{WIN} window")
    w = gaussian_window()
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    mu_a = _filter_valid(a, w)
    mu_b = _filter_valid(b, w)
    saa = _filter_valid(a * a, w) - mu_a * mu_a
    sbb = _filter_valid(b * b, w) - mu_b * mu_b
    sab = _filter_valid(a * b, w) - mu_a * mu_b
    smap = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2))
    inside = sliding_window_view(keep, (WIN, WIN)).all(axis=(2, 3))
    if not inside.any():
        raise ValueError("no SSIM window fits inside the evaluated region")
    return float(np.clip(smap[:, inside].mean(), -1.0, 1.0))


def report(a, b, peak: float = 1.0, mask=None) -> MetricReport:
    _, _, keep = _prep(a, b, mask)
    m = mse(a, b, mask)
    return MetricReport(
        mse=m,
        psnr_db=psnr_from_mse(m, peak),
        ssim=ssim(a, b, peak, mask),
        masked=mask is not None,
        pixel_count=int(keep.sum()),
    )
