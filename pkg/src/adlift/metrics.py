"""PSNR and SSIM, including the SSIM gradient used by the fitting loss and the
soft-constraint baseline."""

from __future__ import annotations

import math
from functools import lru_cache

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
PSNR_CAP = 99.0


def _check_pair(a: np.ndarray, b: np.ndarray) -> None:
    if np.shape(a) != np.shape(b):
        raise ValueError(f"shape mismatch: {np.shape(a)} vs {np.shape(b)}")


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak-1.0 PSNR in dB, capped at 99."""
    _check_pair(a, b)
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


@lru_cache(maxsize=16)
def _filter_matrix(n: int) -> np.ndarray:
    """Gaussian blur along one axis with reflect padding, as an (n, n) matrix."""
    r = SSIM_WINDOW // 2
    k = np.exp(-0.5 * (np.arange(-r, r + 1) / SSIM_SIGMA) ** 2)
    k /= k.sum()
    F = np.zeros((n, n))
    for i in range(n):
        for o in range(-r, r + 1):
            j = i + o
            if j < 0:
                j = -j
            elif j >= n:
                j = 2 * (n - 1) - j
            F[i, j] += k[o + r]
    F.setflags(write=False)
    return F


def _blur(x: np.ndarray, FH: np.ndarray, FW: np.ndarray) -> np.ndarray:
    return (FH @ x.transpose(2, 0, 1) @ FW.T).transpose(1, 2, 0)


def _blur_t(x: np.ndarray, FH: np.ndarray, FW: np.ndarray) -> np.ndarray:
    return (FH.T @ x.transpose(2, 0, 1) @ FW).transpose(1, 2, 0)


def ssim_with_grad(a: np.ndarray, b: np.ndarray, want_grad: bool = True) -> tuple[float, np.ndarray | None]:
    """Channel-averaged SSIM of (H, W, 3) images and its gradient w.r.t. ``a``."""
    _check_pair(a, b)
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    h, w = a.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    FH, FW = _filter_matrix(h), _filter_matrix(w)
    mu_a, mu_b = _blur(a, FH, FW), _blur(b, FH, FW)
    e_aa, e_bb, e_ab = _blur(a * a, FH, FW), _blur(b * b, FH, FW), _blur(a * b, FH, FW)
    var_a, var_b = e_aa - mu_a**2, e_bb - mu_b**2
    cov = e_ab - mu_a * mu_b
    A1 = 2 * mu_a * mu_b + SSIM_C1
    A2 = 2 * cov + SSIM_C2
    B1 = mu_a**2 + mu_b**2 + SSIM_C1
    B2 = var_a + var_b + SSIM_C2
    smap = A1 * A2 / (B1 * B2)
    value = float(np.mean(smap))
    if not want_grad:
        return value, None
    n = smap.size
    BB = B1 * B2
    g_mu = (2 * mu_b * A2 / BB - 2 * mu_b * A1 / BB - 2 * mu_a * smap / B1 + 2 * mu_a * smap / B2) / n
    g_eab = 2 * A1 / BB / n
    g_eaa = -smap / B2 / n
    grad = _blur_t(g_mu, FH, FW) + 2 * a * _blur_t(g_eaa, FH, FW) + b * _blur_t(g_eab, FH, FW)
    return value, grad


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Channel-averaged SSIM: 11x11 Gaussian window (sigma 1.5), reflect padding."""
    return ssim_with_grad(a, b, want_grad=False)[0]


def linf(a: np.ndarray, b: np.ndarray) -> float:
    _check_pair(a, b)
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b)))) if np.size(a) else 0.0
