"""Separable image resampling: nearest, bilinear (triangle), bicubic (Keys a=-0.5).

Conventions match the resizers used to produce the standard SR benchmark
numbers: half-pixel centers, symmetric (mirror) boundary handling, and
antialiasing by kernel dilation when downscaling. Bilinear/bicubic build a
per-axis table of source indices and normalized weights, then apply it with
either a numba loop kernel or an equivalent numpy accumulation.
"""

from functools import lru_cache

import numpy as np

from . import accel
from .accel import njit
from .errors import ConfigError, DataError
from .imaging import ImagePlane

KERNELS = ("nearest", "bilinear", "bicubic")


def _cubic(x):
    """Keys cubic with a = -0.5 (Catmull-Rom family), support 2."""
    ax = np.abs(x)
    ax2 = ax * ax
    ax3 = ax2 * ax
    inner = 1.5 * ax3 - 2.5 * ax2 + 1.0
    outer = -0.5 * ax3 + 2.5 * ax2 - 4.0 * ax + 2.0
    return np.where(ax <= 1.0, inner, np.where(ax < 2.0, outer, 0.0))


def _triangle(x):
    ax = np.abs(x)
    return np.where(ax < 1.0, 1.0 - ax, 0.0)


_KERNEL_FNS = {"bilinear": (_triangle, 1.0), "bicubic": (_cubic, 2.0)}


def output_size(n: int, scale: float) -> int:
    out = int(round(n * scale))
    if out < 1:
        raise ConfigError(f"scale {scale} maps {n} samples to zero output size")
    return out


def _mirror_indices(idx, n):
    # symmetric extension: ... 2 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - 1 - idx, idx)


@lru_cache(maxsize=256)
def _contributions(n_in, n_out, scale, kernel):
    """Per-output-sample source indices and weights for one axis. Cached;
    callers must treat the returned arrays as read-only."""
    fn, support = _KERNEL_FNS[kernel]
    coords = (np.arange(n_out, dtype=np.float64) + 0.5) / scale - 0.5
    if scale < 1.0:
        # antialias: dilate the kernel to the source sampling rate
        kscale = scale
        width = support / scale
    else:
        kscale = 1.0
        width = support
    n_taps = int(np.ceil(2.0 * width)) + 2
    left = np.floor(coords - width).astype(np.int64) + 1
    idx = left[:, None] + np.arange(n_taps, dtype=np.int64)[None, :]
    weights = fn((coords[:, None] - idx) * kscale)
    weights /= weights.sum(axis=1, keepdims=True)
    return _mirror_indices(idx, n_in), weights


@njit(cache=True)
def _apply_axis0_numba(plane, idx, weights, out):
    n_out, n_taps = idx.shape
    n_cols = plane.shape[1]
    for i in range(n_out):
        for c in range(n_cols):
            acc = 0.0
            for t in range(n_taps):
                acc += plane[idx[i, t], c] * weights[i, t]
            out[i, c] = acc


def _apply_axis0_numpy(plane, idx, weights, out):
    # accumulate tap by tap in the same order as the loop kernel
    np.multiply(plane[idx[:, 0], :], weights[:, 0:1], out=out)
    for t in range(1, idx.shape[1]):
        out += plane[idx[:, t], :] * weights[:, t:t + 1]


def _apply_axis0(plane, idx, weights):
    out = np.empty((idx.shape[0], plane.shape[1]), dtype=np.float64)
    if accel.NUMBA_ENABLED:
        _apply_axis0_numba(plane, idx, weights, out)
    else:
        _apply_axis0_numpy(plane, idx, weights, out)
    return out


def _resize_nearest(data, scale, out_h, out_w):
    rows = np.floor((np.arange(out_h) + 0.5) / scale).astype(np.int64)
    cols = np.floor((np.arange(out_w) + 0.5) / scale).astype(np.int64)
    rows = np.clip(rows, 0, data.shape[0] - 1)
    cols = np.clip(cols, 0, data.shape[1] - 1)
    return data[rows[:, None], cols[None, :]]


def resize(plane: ImagePlane, scale: float, kernel: str = "bicubic") -> ImagePlane:
    """Resample a plane by `scale` with the named kernel.

    Output dimensions are round(input * scale). Values are not clamped; the
    caller decides whether overshoot is meaningful.
    """
    if scale <= 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    if kernel not in KERNELS:
        raise ConfigError(f"unknown kernel {kernel!r}, expected one of {KERNELS}")
    data = plane.data
    out_h = output_size(plane.height, scale)
    out_w = output_size(plane.width, scale)
    if kernel == "nearest":
        return ImagePlane(_resize_nearest(data, scale, out_h, out_w), plane.lo, plane.hi)
    idx_r, w_r = _contributions(plane.height, out_h, scale, kernel)
    idx_c, w_c = _contributions(plane.width, out_w, scale, kernel)
    tmp = _apply_axis0(np.ascontiguousarray(data), idx_r, w_r)
    out = _apply_axis0(np.ascontiguousarray(tmp.T), idx_c, w_c).T
    return ImagePlane(out, plane.lo, plane.hi)


def resize_batch(batch: np.ndarray, scale: float, kernel: str = "bicubic") -> np.ndarray:
    """Resample a (batch, h, w) stack in two shared-weight passes."""
    if scale <= 0:
        raise ConfigError(f"scale must be positive, got {scale}")
    b, h, w = batch.shape
    out_h = output_size(h, scale)
    out_w = output_size(w, scale)
    if kernel == "nearest":
        return np.stack([_resize_nearest(batch[n], scale, out_h, out_w)
                         for n in range(b)])
    if kernel not in _KERNEL_FNS:
        raise ConfigError(f"unknown kernel {kernel!r}, expected one of {KERNELS}")
    idx_r, w_r = _contributions(h, out_h, scale, kernel)
    idx_c, w_c = _contributions(w, out_w, scale, kernel)
    rows = batch.transpose(1, 0, 2).reshape(h, b * w)
    tmp = _apply_axis0(np.ascontiguousarray(rows), idx_r, w_r)
    tmp = tmp.reshape(out_h, b, w).transpose(2, 1, 0).reshape(w, b * out_h)
    out = _apply_axis0(np.ascontiguousarray(tmp), idx_c, w_c)
    return out.reshape(out_w, b, out_h).transpose(1, 2, 0)


def degrade(plane: ImagePlane, scale: int) -> ImagePlane:
    """Low-resolution counterpart of an HR plane: antialiased bicubic
    downscale by an integer factor, rounded through the 8-bit file domain
    (test sets distribute LR inputs as 8-bit files)."""
    if scale < 1:
        raise ConfigError(f"degradation factor must be >= 1, got {scale}")
    if plane.height % scale or plane.width % scale:
        raise DataError(
            f"plane {plane.height}x{plane.width} not divisible by scale {scale}; modcrop first"
        )
    lr = resize(plane, 1.0 / scale, "bicubic")
    data = np.floor(np.clip(lr.data, 0.0, 1.0) * 255.0 + 0.5) / 255.0
    return ImagePlane(data, plane.lo, plane.hi)
