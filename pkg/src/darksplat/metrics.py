"""Image-quality metrics used for evaluation: PSNR and SSIM.

Both operate on linear images in [0, 1] with dynamic range 1. SSIM is the
standard formulation: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
K2 = 0.03, computed per channel over valid window positions and averaged.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidParameterError

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def psnr(a, b):
    """Peak signal-to-noise ratio in dB; +inf for identical images."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError("image dimensions differ")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return np.inf
    return 10.0 * np.log10(1.0 / mse)


def _gaussian_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    half = (size - 1) / 2.0
    coords = np.arange(size) - half
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    kern = np.outer(g, g)
    return kern / kern.sum()


def _windowed_mean(plane, kern):
    windows = sliding_window_view(plane, (SSIM_WINDOW, SSIM_WINDOW))
    return np.einsum("hwij,ij->hw", windows, kern)


def ssim(a, b):
    """Mean structural similarity over channels and valid window positions."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidParameterError("image dimensions differ")
    if a.ndim == 2:
        a = a[:, :, None]
        b = b[:, :, None]
    if min(a.shape[0], a.shape[1]) < SSIM_WINDOW:
        raise InvalidParameterError(
            f"images must be at least {SSIM_WINDOW} pixels on a side")

    kern = _gaussian_kernel()
    c1 = SSIM_K1 ** 2
    c2 = SSIM_K2 ** 2
    vals = []
    for ch in range(a.shape[2]):
        x = a[:, :, ch]
        y = b[:, :, ch]
        mu_x = _windowed_mean(x, kern)
        mu_y = _windowed_mean(y, kern)
        var_x = _windowed_mean(x * x, kern) - mu_x * mu_x
        var_y = _windowed_mean(y * y, kern) - mu_y * mu_y
        cov = _windowed_mean(x * y, kern) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
        vals.append(np.mean(num / den))
    return float(np.mean(vals))
