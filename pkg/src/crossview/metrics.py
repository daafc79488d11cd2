"""Classical image-quality metrics: SSIM, PSNR, sharpness difference and KID."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.signal import convolve2d

from .core import DimensionMismatch, Image

PSNR_CAP_DB = 100.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


class TooFewSamples(ValueError):
    pass


def _pair(a: Image, b: Image) -> None:
    if a.shape != b.shape:
        raise DimensionMismatch(f"image shapes differ: {a.shape} vs {b.shape}")


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 1-D Gaussian taps."""
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    return g / g.sum()


def _filter_valid(x: np.ndarray, g: np.ndarray) -> np.ndarray:
    return convolve2d(convolve2d(x, g[:, None], mode="valid"), g[None, :], mode="valid")


def ssim_map(a: Image, b: Image) -> np.ndarray:
    """Local SSIM over every fully contained 11x11 Gaussian window (luma)."""
    _pair(a, b)
    if a.height < SSIM_WINDOW or a.width < SSIM_WINDOW:
        raise DimensionMismatch(f"images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for SSIM")
    x, y = a.luma(), b.luma()
    g = gaussian_window()
    mx, my = _filter_valid(x, g), _filter_valid(y, g)
    sxx = _filter_valid(x * x, g) - mx * mx
    syy = _filter_valid(y * y, g) - my * my
    sxy = _filter_valid(x * y, g) - mx * my
    num = (2 * mx * my + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mx * mx + my * my + SSIM_C1) * (sxx + syy + SSIM_C2)
    return num / den


def ssim(a: Image, b: Image) -> float:
    return float(np.mean(ssim_map(a, b)))


def _psnr_from_mse(mse: float) -> float:
    if mse <= 0.0:
        return PSNR_CAP_DB
    return float(min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB))


def psnr(a: Image, b: Image) -> float:
    """PSNR in dB on the [0, 1] range over all channels, capped at 100 dB."""
    _pair(a, b)
    diff = a.pixels - b.pixels
    return _psnr_from_mse(float(np.mean(diff * diff)))


def gradient_magnitude(x: np.ndarray) -> np.ndarray:
    """``|dx| + |dy|`` with forward differences, shape ``(H-1, W-1)``."""
    dx = np.abs(x[:-1, 1:] - x[:-1, :-1])
    dy = np.abs(x[1:, :-1] - x[:-1, :-1])
    return dx + dy


def sharpness_difference(a: Image, b: Image) -> float:
    """PSNR-style score between the gradient-magnitude maps of the two lumas."""
    _pair(a, b)
    if a.height < 2 or a.width < 2:
        raise DimensionMismatch("sharpness difference needs at least 2x2 images")
    diff = gradient_magnitude(a.luma()) - gradient_magnitude(b.luma())
    return _psnr_from_mse(float(np.mean(diff * diff)))


def polynomial_kernel(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    d = x.shape[1]
    return (x @ y.T / d + 1.0) ** 3


def kid(fa: np.ndarray, fb: np.ndarray) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel.

    For equal set sizes the cross term also drops the ``i == j`` pairs, which
    is the U-statistic over paired samples; it is unbiased and vanishes
    exactly when the two sets coincide element for element.  Unequal sizes
    use the full cross term.
    """
    x = np.asarray(fa, dtype=np.float64)
    y = np.asarray(fb, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[1] != y.shape[1]:
        raise DimensionMismatch(f"feature sets must be n x d with equal d: {x.shape}, {y.shape}")
    m, n = x.shape[0], y.shape[0]
    if m < 2 or n < 2:
        raise TooFewSamples("each feature set needs at least 2 vectors")
    kxx = polynomial_kernel(x, x)
    kyy = polynomial_kernel(y, y)
    kxy = polynomial_kernel(x, y)
    term_x = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    term_y = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    if m == n:
        cross = (kxy.sum() - np.trace(kxy)) / (m * (m - 1))
    else:
        cross = kxy.sum() / (m * n)
    return float(term_x + term_y - 2.0 * cross)


@dataclass
class MetricReport:
    per_image: dict = field(default_factory=dict)
    kid: float | None = None

    def add(self, name: str, pred: Image, gt: Image) -> dict:
        row = {
            "ssim": ssim(pred, gt),
            "psnr_db": psnr(pred, gt),
            "sd": sharpness_difference(pred, gt),
        }
        self.per_image[name] = row
        return row

    def means(self) -> dict:
        if not self.per_image:
            return {}
        keys = ("ssim", "psnr_db", "sd")
        return {k: float(np.mean([r[k] for r in self.per_image.values()])) for k in keys}

    def as_dict(self) -> dict:
        return {
            "count": len(self.per_image),
            "mean": self.means(),
            "kid": self.kid,
            "per_image": {k: self.per_image[k] for k in sorted(self.per_image)},
        }
