"""Image quality metrics on [0, 1] images (peak 1.0)."""
from __future__ import annotations

import math

import numpy as np
from scipy import ndimage

SSIM_WIN = 11
SSIM_SIGMA = 1.5
K1, K2 = 0.01, 0.03


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {y.shape}")
    return x, y


def psnr(x, y) -> float:
    """``10 log10(1 / MSE)``; identical inputs give ``inf``."""
    x, y = _pair(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size: int = SSIM_WIN, sigma: float = SSIM_SIGMA) -> np.ndarray:
    t = np.arange(size) - (size - 1) / 2
    g = np.exp(-t ** 2 / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(x, y) -> float:
    """Single-scale SSIM with an 11x11 Gaussian window, mean over valid windows.

    Leading singleton axes are dropped; each remaining 2-D slice is scored
    and the results are averaged.
    """
    x, y = _pair(x, y)
    x = x.reshape((-1,) + x.shape[-2:])
    y = y.reshape(x.shape)
    if min(x.shape[-2:]) < SSIM_WIN:
        raise ValueError(f"ssim needs images of at least {SSIM_WIN}x{SSIM_WIN}, got {x.shape[-2:]}")
    w = gaussian_window()
    c1, c2 = K1 ** 2, K2 ** 2

    def filt(a):
        return ndimage.correlate(a, w, mode="constant")[5:-5, 5:-5]

    vals = []
    for a, b in zip(x, y):
        mx, my = filt(a), filt(b)
        sxx = filt(a * a) - mx * mx
        syy = filt(b * b) - my * my
        sxy = filt(a * b) - mx * my
        num = (2 * mx * my + c1) * (2 * sxy + c2)
        den = (mx * mx + my * my + c1) * (sxx + syy + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
