"""Image quality measures: MSE, global SSIM and equivalent number of looks."""

from __future__ import annotations

import numpy as np


class UndefinedMetric(ValueError):
    """The metric has no value for this input (e.g. ENL of a constant patch)."""


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty images")
    return a, b


def mse(a, b) -> float:
    """Mean squared error of 8-bit images rescaled to [0, 1]."""
    a, b = _pair(a, b)
    return float(np.mean((a / 255.0 - b / 255.0) ** 2))


def ssim(a, b, data_range: float = 255.0) -> float:
    """Single-window SSIM over the whole image.

    Uses the whole-image means, population variances and covariance with
    ``c1 = (0.01 L)^2`` and ``c2 = (0.03 L)^2``.
    """
    a, b = _pair(a, b)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    mu_a, mu_b = a.mean(), b.mean()
    da, db = a - mu_a, b - mu_b
    var_a, var_b = np.mean(da * da), np.mean(db * db)
    cov = np.mean(da * db)
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    if den == 0:
        # only reachable with data_range == 0, i.e. two identical all-zero inputs
        return 1.0
    return float(num / den)


def enl(img) -> float:
    """Equivalent number of looks ``mean^2 / var`` (population variance)."""
    x = np.asarray(img, dtype=np.float64)
    if x.size == 0:
        raise ValueError("empty image")
    var = x.var()
    if var == 0:
        raise UndefinedMetric("ENL undefined for a constant image")
    return float(x.mean() ** 2 / var)
