"""Dual-path fused interpolation over a tabulated scalar function.

A table holds one output vector per quantizer grid level. Evaluation fetches
the rows at the floor and ceil levels of the companded input and blends them
with the fractional position between the two levels, so the table behaves as
a continuous piecewise-linear function of its input rather than a staircase.
"""

import numpy as np

from .errors import ConfigError, DataError
from .quantize import NonUniformQuantizer, grid_split


def fusion_weight(x_trans, floor_level_value, bits: int):
    """Fractional position of x_trans above its floor grid level, in [0, 1].

    The grid spacing is 1/(2^(bits-1) - 1), so the product with that factor
    lands in [0, 1]; clamping absorbs rounding jitter. A floor level above
    x_trans by more than jitter means the caller mismatched grid and value.
    """
    n = 2 ** (bits - 1) - 1
    t = (np.asarray(x_trans, dtype=np.float64) - floor_level_value) * n
    if np.any(t < -1e-9) or np.any(t > 1.0 + 1e-9):
        raise ConfigError("floor level is not the grid neighbour of x_trans")
    return np.clip(t, 0.0, 1.0)


def fuse(x_floor_out, x_ceil_out, t):
    """Element-wise convex combination (1-t)*floor + t*ceil."""
    lo = np.asarray(x_floor_out, dtype=np.float64)
    hi = np.asarray(x_ceil_out, dtype=np.float64)
    if lo.shape != hi.shape:
        raise ConfigError(f"fuse operands differ in shape: {lo.shape} vs {hi.shape}")
    return (1.0 - t) * lo + t * hi


def table_lookup(table: np.ndarray, q: NonUniformQuantizer, x):
    """Evaluate a (n_levels, entry_width) table at scalar input(s) x.

    x is in the quantizer domain [-1, 1] (clamped). Returns shape
    x.shape + (entry_width,). On-grid inputs return stored rows exactly.
    """
    table = np.asarray(table, dtype=np.float64)
    if table.ndim != 2 or table.shape[0] != q.n_levels:
        raise DataError(
            f"table has {table.shape[0] if table.ndim == 2 else '?'} levels, "
            f"quantizer wants {q.n_levels}"
        )
    k_floor, k_ceil, t, _xt = grid_split(q, x)
    n = q.half_levels
    rows_floor = table[k_floor + n]
    rows_ceil = table[k_ceil + n]
    return fuse(rows_floor, rows_ceil, np.expand_dims(t, -1))


def dpfi_eval(table: np.ndarray, q: NonUniformQuantizer, x: float) -> np.ndarray:
    """Single-input convenience form of table_lookup."""
    return table_lookup(table, q, np.float64(x))
