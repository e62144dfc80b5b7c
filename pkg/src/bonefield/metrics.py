"""Image quality metrics for evaluation: PSNR and windowed SSIM."""

from __future__ import annotations

import numpy as np

PSNR_CAP = 99.0  # reported for bit-identical images (mse == 0)


def psnr(a, b, cap=PSNR_CAP):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mse = np.mean((a - b) ** 2)
    if mse == 0.0:
        return cap
    return min(cap, -10.0 * np.log10(mse))


def _gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim(a, b, window_size=11, sigma=1.5, k1=0.01, k2=0.03, data_range=1.0):
    """Mean structural similarity with the standard Gaussian window.

    Computed per channel on valid (fully interior) windows and averaged."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"ssim shapes differ: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a = a[..., None]
        b = b[..., None]
    win = _gaussian_window(window_size, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    from numpy.lib.stride_tricks import sliding_window_view

    vals = []
    for ch in range(a.shape[2]):
        wa = sliding_window_view(a[..., ch], (window_size, window_size))
        wb = sliding_window_view(b[..., ch], (window_size, window_size))
        mu_a = np.einsum("ijkl,kl->ij", wa, win)
        mu_b = np.einsum("ijkl,kl->ij", wb, win)
        ea2 = np.einsum("ijkl,kl->ij", wa * wa, win)
        eb2 = np.einsum("ijkl,kl->ij", wb * wb, win)
        eab = np.einsum("ijkl,kl->ij", wa * wb, win)
        var_a = ea2 - mu_a**2
        var_b = eb2 - mu_b**2
        cov = eab - mu_a * mu_b
        s = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / \
            ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
        vals.append(s.mean())
    return float(np.mean(vals))
