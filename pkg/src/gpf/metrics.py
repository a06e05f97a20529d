"""Image quality metrics."""

from __future__ import annotations

import numpy as np
from scipy import ndimage

SSIM_SIGMA = 1.5
SSIM_WIN = 11
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _check(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(img_a, img_b) -> float:
    """10 log10(1 / MSE) for images in [0, 1]; +inf for identical images."""
    a, b = _check(img_a, img_b)
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0 else 10.0 * np.log10(1.0 / mse)


def ssim(img_a, img_b, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels.

    Statistics use the unbiased (N-1) covariance over the window and only
    positions where the full window fits inside the image.
    """
    a, b = _check(img_a, img_b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if min(a.shape[:2]) < SSIM_WIN:
        raise ValueError(f"images must be at least {SSIM_WIN}x{SSIM_WIN}")
    C1 = (SSIM_K1 * data_range) ** 2
    C2 = (SSIM_K2 * data_range) ** 2
    trunc = (SSIM_WIN // 2) / SSIM_SIGMA
    n = SSIM_WIN * SSIM_WIN
    cov_norm = n / (n - 1)
    pad = SSIM_WIN // 2
    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]

        def filt(z):
            return ndimage.gaussian_filter(z, SSIM_SIGMA, truncate=trunc, mode="reflect")

        mx, my = filt(x), filt(y)
        vx = cov_norm * (filt(x * x) - mx * mx)
        vy = cov_norm * (filt(y * y) - my * my)
        vxy = cov_norm * (filt(x * y) - mx * my)
        s = ((2 * mx * my + C1) * (2 * vxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
        vals.append(s[pad:-pad, pad:-pad].mean())
    return float(np.mean(vals))
