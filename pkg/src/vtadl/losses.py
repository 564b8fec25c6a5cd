"""Reconstruction losses and the composite training objective."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor


@dataclass
class LossBreakdown:
    nll: float
    mse: float
    ssim_value: float
    total: float


def _as_tensor(x, like=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=None if like is None else like.dtype))


def mse(x, xhat, per_image: bool = False) -> Tensor:
    """Mean squared pixel difference over H, W and C (and the batch unless ``per_image``)."""
    xhat = _as_tensor(xhat)
    x = _as_tensor(x, xhat)
    if x.shape != xhat.shape:
        raise ShapeError(f"mse operands differ in shape: {x.shape} vs {xhat.shape}")
    d = x - xhat
    sq = d * d
    if per_image and sq.ndim == 4:
        return sq.mean(axis=(1, 2, 3))
    return sq.mean()


def gaussian_window(size: int, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    return g / g.sum()


def ssim(x, y, window: int = 11, data_range: float = 2.0, sigma: float = 1.5,
         per_image: bool = False) -> Tensor:
    """Gaussian-windowed SSIM averaged over valid positions and channels.

    Inputs are ``[H, W]``, ``[H, W, C]`` or ``[B, H, W, C]``. Returns the batch
    mean, or one value per image when ``per_image`` is set.
    """
    y = _as_tensor(y)
    x = _as_tensor(x, y)
    if x.shape != y.shape:
        raise ShapeError(f"ssim operands differ in shape: {x.shape} vs {y.shape}")
    if window % 2 == 0:
        raise ValueError("ssim window must be odd")
    if x.ndim == 2:
        x, y = x.reshape(1, *x.shape, 1), y.reshape(1, *y.shape, 1)
    elif x.ndim == 3:
        x, y = x.reshape(1, *x.shape), y.reshape(1, *y.shape)
    if window > min(x.shape[1], x.shape[2]):
        raise ShapeError(f"ssim window {window} larger than image {x.shape[1]}x{x.shape[2]}")
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    g = gaussian_window(window, sigma)

    def filt(t):
        return T.correlate_valid(T.correlate_valid(t, g, axis=1), g, axis=2)

    mu_x, mu_y = filt(x), filt(y)
    mu_xx, mu_yy, mu_xy = mu_x * mu_x, mu_y * mu_y, mu_x * mu_y
    var_x = filt(x * x) - mu_xx
    var_y = filt(y * y) - mu_yy
    cov = filt(x * y) - mu_xy
    num = (mu_xy * 2.0 + c1) * (cov * 2.0 + c2)
    den = (mu_xx + mu_yy + c1) * (var_x + var_y + c2)
    smap = num / den
    if per_image:
        return smap.mean(axis=(1, 2, 3))
    return smap.mean()


def total_loss(x, xhat, mdn_nll: Tensor, lambda1: float = 5.0, lambda2: float = 0.5,
               window: int = 11) -> tuple[Tensor, LossBreakdown]:
    """``nll + lambda1 * mse + lambda2 * (1 - ssim)``; returns the graph node and a float breakdown."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("loss weights must be >= 0")
    m = mse(x, xhat)
    s = ssim(x, xhat, window=window)
    total = mdn_nll + m * lambda1 + (1.0 - s) * lambda2
    return total, LossBreakdown(float(mdn_nll.data), float(m.data), float(s.data), float(total.data))


def combine(nll: float, mse_value: float, ssim_value: float, lambda1: float = 5.0,
            lambda2: float = 0.5) -> LossBreakdown:
    """Scalar-only version of :func:`total_loss` for already-evaluated terms."""
    return LossBreakdown(nll, mse_value, ssim_value, nll + lambda1 * mse_value + lambda2 * (1.0 - ssim_value))
