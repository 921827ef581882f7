"""Training loss and image-quality metrics.

The training loss blends mean absolute error with structural dissimilarity,
L = (1-lambda) L1 + lambda (1-SSIM)/2, and both terms come with exact analytic
gradients w.r.t. the rendered image. SSIM follows the standard formulation:
11x11 Gaussian window (sigma 1.5), C1=0.01^2 and C2=0.03^2 for unit dynamic
range, computed per channel on the padding-free valid region and averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import convolve1d

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
DEFAULT_LAMBDA = 0.2
_HALF = SSIM_WINDOW // 2


@dataclass
class LossReport:
    total: float
    l1: float
    d_ssim: float
    lam: float


def _check_pair(a: np.ndarray, b: np.ndarray):
    if a.shape != b.shape:
        raise ValueError(f"image shapes differ: {a.shape} vs {b.shape}")


def l1_loss(rendered: np.ndarray, target: np.ndarray):
    """Mean absolute difference and its gradient w.r.t. rendered."""
    _check_pair(rendered, target)
    diff = rendered - target
    grad = np.sign(diff) / diff.size
    return float(np.abs(diff).mean()), grad


def psnr(rendered: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for unit dynamic range; inf when equal."""
    _check_pair(rendered, target)
    mse = float(np.mean((rendered - target) ** 2))
    if mse == 0.0:
        return float("inf")
    return -10.0 * np.log10(mse)


def _gaussian_taps(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return g


_TAPS = _gaussian_taps()


def _valid_conv(img: np.ndarray) -> np.ndarray:
    """Separable window convolution restricted to the padding-free region."""
    out = convolve1d(img, _TAPS, axis=0, mode="constant")
    out = convolve1d(out, _TAPS, axis=1, mode="constant")
    return out[_HALF:-_HALF, _HALF:-_HALF]


def _full_conv(coeff: np.ndarray, shape) -> np.ndarray:
    """Adjoint of _valid_conv for the symmetric window: scatter back to shape."""
    canvas = np.zeros(shape)
    canvas[_HALF:-_HALF, _HALF:-_HALF] = coeff
    canvas = convolve1d(canvas, _TAPS, axis=0, mode="constant")
    return convolve1d(canvas, _TAPS, axis=1, mode="constant")


def _channels(img: np.ndarray):
    if img.ndim == 2:
        return img[:, :, None]
    return img


def _ssim_fields(x2d: np.ndarray, y2d: np.ndarray):
    # Valid-mode local statistics; the uncentered trick keeps everything as
    # plain window convolutions, which is what the gradient differentiates.
    mu_x = _valid_conv(x2d)
    mu_y = _valid_conv(y2d)
    m_xx = _valid_conv(x2d * x2d)
    m_yy = _valid_conv(y2d * y2d)
    m_xy = _valid_conv(x2d * y2d)
    var_x = m_xx - mu_x * mu_x
    var_y = m_yy - mu_y * mu_y
    cov = m_xy - mu_x * mu_y
    a1 = 2.0 * mu_x * mu_y + SSIM_C1
    a2 = 2.0 * cov + SSIM_C2
    b1 = mu_x * mu_x + mu_y * mu_y + SSIM_C1
    b2 = var_x + var_y + SSIM_C2
    return mu_x, mu_y, a1, a2, b1, b2


def ssim(x: np.ndarray, y: np.ndarray) -> float:
    """Mean local SSIM over the valid window region, averaged over channels."""
    _check_pair(x, y)
    xc, yc = _channels(np.asarray(x, dtype=np.float64)), _channels(np.asarray(y, dtype=np.float64))
    h, w = xc.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    vals = []
    for c in range(xc.shape[2]):
        _, _, a1, a2, b1, b2 = _ssim_fields(xc[:, :, c], yc[:, :, c])
        vals.append(np.mean(a1 * a2 / (b1 * b2)))
    return float(np.mean(vals))


def dssim_with_grad(rendered: np.ndarray, target: np.ndarray):
    """(1 - SSIM)/2 and its exact gradient w.r.t. rendered.

    The SSIM map is a pointwise function of five window convolutions of the
    input; the gradient is the adjoint chain: pointwise coefficients scattered
    back through the (symmetric) window with a full-mode convolution.
    """
    _check_pair(rendered, target)
    x = _channels(np.asarray(rendered, dtype=np.float64))
    y = _channels(np.asarray(target, dtype=np.float64))
    h, w = x.shape[:2]
    if h < SSIM_WINDOW or w < SSIM_WINDOW:
        raise ValueError(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    n_ch = x.shape[2]
    grad = np.zeros_like(x)
    total = 0.0
    n_map = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1)
    for c in range(n_ch):
        xc, yc = x[:, :, c], y[:, :, c]
        mu_x, mu_y, a1, a2, b1, b2 = _ssim_fields(xc, yc)
        denom = b1 * b2
        s_map = a1 * a2 / denom
        total += float(np.mean(s_map))

        # d(mean SSIM)/d(field) per window position; mean over map and channels.
        scale = 1.0 / (n_map * n_ch)
        dA1 = a2 / denom * scale
        dA2 = a1 / denom * scale
        dB1 = -s_map / b1 * scale
        dB2 = -s_map / b2 * scale
        # Fields in terms of raw convolutions: mu_x, m_xx = G*x^2, m_xy = G*(xy).
        d_mu_x = 2.0 * mu_y * dA1 + 2.0 * mu_x * dB1 \
            - 2.0 * mu_y * dA2 - 2.0 * mu_x * dB2
        d_mxx = dB2
        d_mxy = 2.0 * dA2
        # Adjoint of valid convolution with a symmetric window is full convolution.
        g = _full_conv(d_mu_x, xc.shape)
        g += _full_conv(d_mxx, xc.shape) * (2.0 * xc)
        g += _full_conv(d_mxy, xc.shape) * yc
        grad[:, :, c] = g

    mean_ssim = total / n_ch
    d_ssim = (1.0 - mean_ssim) / 2.0
    grad *= -0.5
    if rendered.ndim == 2:
        grad = grad[:, :, 0]
    return d_ssim, grad


def compute_loss(rendered: np.ndarray, target: np.ndarray,
                 lam: float = DEFAULT_LAMBDA):
    """Combined training loss with gradient w.r.t. rendered."""
    l1, g1 = l1_loss(rendered, target)
    ds, gd = dssim_with_grad(rendered, target)
    total = (1.0 - lam) * l1 + lam * ds
    grad = (1.0 - lam) * g1 + lam * gd
    report = LossReport(total=total, l1=l1, d_ssim=ds, lam=lam)
    if np.isfinite(total):  # non-finite losses are the trainer's divergence guard
        assert abs(report.total - ((1.0 - lam) * report.l1 + lam * report.d_ssim)) < 1e-12
    return report, grad
