"""Shared SSIM machinery for the loss and metric modules.

Local statistics use an 11x11 Gaussian window (sigma 1.5) applied per channel
with zero-padded 'same' convolution, constants C1 = 0.01^2 and C2 = 0.03^2 on
[0, 1] intensities.  The window is symmetric and the padding is constant, so
the filtering operator is exactly self-adjoint; the analytic gradient below
reuses the same filter.
"""

from __future__ import annotations

import numpy as np
from scipy.ndimage import correlate1d

from .errors import ValidationError

WINDOW_SIZE = 11
WINDOW_SIGMA = 1.5
C1 = 0.01 ** 2
C2 = 0.03 ** 2


def _window() -> np.ndarray:
    half = (WINDOW_SIZE - 1) / 2.0
    x = np.arange(WINDOW_SIZE) - half
    w = np.exp(-(x * x) / (2.0 * WINDOW_SIGMA ** 2))
    return w / w.sum()


_W1D = _window()


def _filter(img: np.ndarray) -> np.ndarray:
    out = correlate1d(img, _W1D, axis=0, mode="constant", cval=0.0)
    return correlate1d(out, _W1D, axis=1, mode="constant", cval=0.0)


def _check_pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"image shapes differ: {a.shape} vs {b.shape}")
    if a.ndim not in (2, 3):
        raise ValidationError(f"expected (H, W) or (H, W, C) images, got shape {a.shape}")
    return a, b


def _ssim_fields(a: np.ndarray, b: np.ndarray):
    mu1 = _filter(a)
    mu2 = _filter(b)
    s1 = _filter(a * a) - mu1 * mu1
    s2 = _filter(b * b) - mu2 * mu2
    s12 = _filter(a * b) - mu1 * mu2
    n1 = 2.0 * mu1 * mu2 + C1
    n2 = 2.0 * s12 + C2
    d1 = mu1 * mu1 + mu2 * mu2 + C1
    d2 = s1 + s2 + C2
    return mu1, mu2, n1, n2, d1, d2


def ssim(a, b) -> float:
    """Mean local SSIM between two images, in [-1, 1]."""
    a, b = _check_pair(a, b)
    _, _, n1, n2, d1, d2 = _ssim_fields(a, b)
    return float(np.mean((n1 * n2) / (d1 * d2)))


def ssim_with_grad(a, b):
    """SSIM value plus its gradient with respect to the first image.

    Returns:
        (value, grad) with grad shaped like ``a``.
    """
    a, b = _check_pair(a, b)
    mu1, mu2, n1, n2, d1, d2 = _ssim_fields(a, b)
    den = d1 * d2
    smap = (n1 * n2) / den
    value = float(np.mean(smap))

    # dL/d(map) for L = mean(map); chain through mu1, sigma1, sigma12 fields.
    scale = 1.0 / smap.size
    d_mu1 = scale * (2.0 * mu2 * n2 / den - 2.0 * mu1 * smap / d1)
    d_s1 = scale * (-smap / d2)
    d_s12 = scale * (2.0 * n1 / den)

    # sigma1 = F(a^2) - mu1^2, sigma12 = F(ab) - mu1 mu2, mu1 = F(a); the
    # filter is self-adjoint, so each adjoint is the same convolution.
    d_mu1_total = d_mu1 - 2.0 * mu1 * d_s1 - mu2 * d_s12
    grad = _filter(d_mu1_total) + 2.0 * a * _filter(d_s1) + b * _filter(d_s12)
    return value, grad
