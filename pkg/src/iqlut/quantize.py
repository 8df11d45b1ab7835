"""Non-uniform quantization on [-1, 1].

The forward companding map is a symmetric three-piece linear function with
one learnable knee: it fixes -1, 0, and +1, sends the breakpoint `a` to `b`,
and uses slopes b/a inside the knee and (1-b)/(1-a) outside. Its exact
inverse is the same map with (a, b) swapped. Quantization is uniform in the
transformed domain on a signed grid of 2^bits - 1 levels, and rounds both
down and up so the two neighbouring levels can be interpolated downstream.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

GRID_START = (0.5, 0.5)
DEFAULT_GRID = tuple(round(0.05 * k, 2) for k in range(1, 20))

# grid positions within this distance (in level units) of an integer snap to
# it, so level preimages survive the float round trip through the companding
# map and return stored table rows exactly
GRID_SNAP = 1e-9


@dataclass(frozen=True)
class NonUniformQuantizer:
    a: float
    b: float
    bits: int

    def __post_init__(self):
        if not (0.0 < self.a < 1.0 and 0.0 < self.b < 1.0):
            raise ConfigError(f"breakpoints must lie in (0,1), got a={self.a}, b={self.b}")
        if self.bits < 2:
            raise ConfigError(f"bits must be >= 2, got {self.bits}")

    @property
    def s_m(self) -> float:
        return self.b / self.a

    @property
    def s_o(self) -> float:
        return (1.0 - self.b) / (1.0 - self.a)

    @property
    def half_levels(self) -> int:
        """Levels on each side of zero; the grid is k/half_levels."""
        return 2 ** (self.bits - 1) - 1

    @property
    def n_levels(self) -> int:
        return 2 * self.half_levels + 1

    def level_values(self) -> np.ndarray:
        n = self.half_levels
        return np.arange(-n, n + 1, dtype=np.float64) / n

    def transform(self, x):
        """Piecewise-linear companding of values in [-1, 1] (clamped)."""
        return _piecewise(np.clip(x, -1.0, 1.0), self.a, self.b)

    def inverse_transform(self, y):
        """Exact inverse: the same map with swapped breakpoints."""
        return _piecewise(np.clip(y, -1.0, 1.0), self.b, self.a)

    def quantize_bidirectional(self, x):
        """(floor_index, ceil_index, transformed value); indices are signed
        grid positions in [-half_levels, half_levels]."""
        k_floor, k_ceil, _t, xt = grid_split(self, x)
        return k_floor, k_ceil, xt

    def level_preimages(self) -> np.ndarray:
        """Where each grid level came from in the untransformed domain."""
        return self.inverse_transform(self.level_values())


def grid_split(q: "NonUniformQuantizer", x):
    """Floor/ceil grid indices, the fractional position between them, and the
    transformed value. Positions within GRID_SNAP of a level are treated as
    exactly on-grid (t = 0, indices equal)."""
    xt = q.transform(x)
    n = q.half_levels
    g = xt * n
    near = np.floor(g + 0.5)
    g = np.where(np.abs(g - near) <= GRID_SNAP, near, g)
    k_floor = np.clip(np.floor(g), -n, n).astype(np.int64)
    k_ceil = np.clip(np.ceil(g), -n, n).astype(np.int64)
    t = np.clip(g - k_floor, 0.0, 1.0)
    return k_floor, k_ceil, t, xt


def _piecewise(x, a, b):
    if a == b:
        return np.asarray(x, dtype=np.float64)  # slopes are exactly 1
    s_m = b / a
    s_o = (1.0 - b) / (1.0 - a)
    ax = np.abs(x)
    core = s_m * x
    outer = np.sign(x) * (b + s_o * (ax - a))
    return np.where(ax < a, core, outer)


@dataclass(frozen=True)
class ActRange:
    """Affine map between a stage's activation range and the quantizer
    domain [-1, 1]. Calibrated from observed min/max."""

    lo: float
    hi: float

    def __post_init__(self):
        if not np.isfinite(self.lo) or not np.isfinite(self.hi) or self.hi < self.lo:
            raise ConfigError(f"bad activation range [{self.lo}, {self.hi}]")
        if self.hi - self.lo < 1e-12:
            # degenerate (constant activations): widen so the map stays defined
            object.__setattr__(self, "hi", self.lo + 1.0)

    def normalize(self, x):
        return np.clip(2.0 * (x - self.lo) / (self.hi - self.lo) - 1.0, -1.0, 1.0)

    def denormalize(self, xn):
        return self.lo + (np.asarray(xn) + 1.0) * 0.5 * (self.hi - self.lo)

    @property
    def gain(self) -> float:
        return 2.0 / (self.hi - self.lo)


def observed_range(arrays) -> ActRange:
    lo = min(float(np.min(a)) for a in arrays)
    hi = max(float(np.max(a)) for a in arrays)
    return ActRange(lo, hi)


@dataclass(frozen=True)
class StageQuant:
    """Everything one stage needs to quantize its input: the companding
    quantizer plus the calibrated activation range."""

    q: NonUniformQuantizer
    act: ActRange


def _axis_best(objective_1d, current, grid):
    """Best grid value along one axis; keeps `current` unless a candidate is
    strictly better under (loss, distance to 0.5, value)."""
    best_v = current
    best_key = (objective_1d(current), abs(current - 0.5), current)
    for v in grid:
        key = (objective_1d(v), abs(v - 0.5), v)
        if key < best_key:
            best_v, best_key = v, key
    return best_v


def greedy_search_ab(objective, grid=DEFAULT_GRID, start=GRID_START,
                     max_sweeps: int = 64):
    """Coordinate-descent over a finite (a, b) grid.

    Starting from `start`, alternately optimize a with b fixed and b with the
    new a fixed, until neither single-axis move helps. Ties go to the value
    closest to 0.5, then to the smaller one, so results are deterministic and
    the constant objective returns the start point. The returned loss never
    exceeds the start loss because moves happen only on strict improvement.
    """
    grid = tuple(grid)
    if not grid:
        raise ConfigError("candidate grid is empty")
    a, b = start
    for _ in range(max_sweeps):
        new_a = _axis_best(lambda v: objective(v, b), a, grid)
        new_b = _axis_best(lambda v: objective(new_a, v), b, grid)
        if (new_a, new_b) == (a, b):
            break
        a, b = new_a, new_b
    return a, b
