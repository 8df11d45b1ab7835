"""Fidelity metrics: PSNR and single-scale SSIM.

Both operate on matching planes. SSIM uses the original formulation's
11x11 Gaussian window (sigma 1.5), stability constants K1=0.01 / K2=0.03,
and averages the valid-window map.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .imaging import ImagePlane

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


@dataclass(frozen=True)
class MetricReport:
    psnr: float  # dB; math.inf for identical inputs
    ssim: float
    channel: str = "y"

    def as_record(self) -> dict:
        return {"psnr": self.psnr, "ssim": self.ssim, "channel": self.channel}


def _pair(a: ImagePlane, b: ImagePlane):
    if a.data.shape != b.data.shape:
        raise DataError(f"plane shapes differ: {a.data.shape} vs {b.data.shape}")
    return a.data, b.data


def mse(a: ImagePlane, b: ImagePlane) -> float:
    x, y = _pair(a, b)
    return float(np.mean((x - y) ** 2))


def psnr(a: ImagePlane, b: ImagePlane, peak: float = 1.0) -> float:
    """10*log10(peak^2 / MSE); identical inputs give math.inf."""
    if peak <= 0:
        raise DataError(f"peak must be positive, got {peak}")
    err = mse(a, b)
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / err)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    half = (size - 1) / 2.0
    x = np.arange(size, dtype=np.float64) - half
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable correlation with a 1-D window, valid region only."""
    taps = g.size
    h, w = img.shape
    tmp = np.zeros((h - taps + 1, w), dtype=np.float64)
    for t in range(taps):
        tmp += g[t] * img[t:t + h - taps + 1, :]
    out = np.zeros((h - taps + 1, w - taps + 1), dtype=np.float64)
    for t in range(taps):
        out += g[t] * tmp[:, t:t + w - taps + 1]
    return out


def ssim(a: ImagePlane, b: ImagePlane, peak: float = 1.0) -> float:
    x, y = _pair(a, b)
    if min(x.shape) < SSIM_WINDOW:
        raise DataError(f"plane {x.shape} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    c1 = (SSIM_K1 * peak) ** 2
    c2 = (SSIM_K2 * peak) ** 2
    g = gaussian_window()
    mu_x = _filter_valid(x, g)
    mu_y = _filter_valid(y, g)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    var_x = _filter_valid(x * x, g) - mu_xx
    var_y = _filter_valid(y * y, g) - mu_yy
    cov = _filter_valid(x * y, g) - mu_xy
    num = (2.0 * mu_xy + c1) * (2.0 * cov + c2)
    den = (mu_xx + mu_yy + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


def measure(reference: ImagePlane, test: ImagePlane, peak: float = 1.0,
            channel: str = "y") -> MetricReport:
    return MetricReport(psnr=psnr(reference, test, peak),
                        ssim=ssim(reference, test, peak), channel=channel)
