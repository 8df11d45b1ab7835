"""Benchmark the jitted kernels against their pure-numpy fallbacks.

Run as `python -m iqlut.bench [--size N] [--scale S] [--repeats R]`.
Covers the two hot paths: separable resampling and the table-driven stage
(companding + bidirectional rounding + fused fetch + tap scatter). Both
implementations produce identical outputs; only the clock differs.
"""

import argparse
import time

import numpy as np

from . import accel
from .imaging import ImagePlane
from .lut import _stage_apply, calibrate, convert_model
from .model import ModelSpec, init_model
from .network import apply_tables_stage
from .resize import _apply_axis0_numba, _apply_axis0_numpy, _contributions


def _time(fn, repeats: int) -> float:
    fn()  # warm-up (numba compilation, cache faults)
    best = np.inf
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_resize(size: int, scale: float, repeats: int):
    rng = np.random.default_rng(0)
    plane = rng.random((size, size))
    out_h = int(round(size * scale))
    idx, w = _contributions(size, out_h, scale, "bicubic")
    out = np.empty((out_h, size))

    def run_numpy():
        _apply_axis0_numpy(plane, idx, w, out)

    rows = [("resize bicubic axis-pass (numpy)", _time(run_numpy, repeats), None)]
    if accel.HAVE_NUMBA:
        def run_numba():
            _apply_axis0_numba(plane, idx, w, out)

        t_nb = _time(run_numba, repeats)
        rows.append(("resize bicubic axis-pass (numba)", t_nb, rows[0][1] / t_nb))
    return rows


def bench_stage(size: int, repeats: int):
    spec = ModelSpec(layers=2, channels=8, upscale=4)
    model = init_model(spec, seed=0)
    rng = np.random.default_rng(1)
    calib = [ImagePlane(rng.random((24, 24))) for _ in range(2)]
    quant = calibrate(model, calib, search=False)
    lm = convert_model(model, quant)
    stage = lm.stages[1]
    tabs = [t.dequantized() for t in stage.tables]
    sq = stage.stage_quant()
    x = rng.random((spec.channels, size, size))
    kh, kw = spec.kernel
    c_out = spec.stage_channels(1)[1]

    def run_numpy():
        apply_tables_stage(x[None], tabs, sq.q, sq.act, c_out, kh, kw)

    rows = [("table stage 8ch (numpy)", _time(run_numpy, repeats), None)]
    if accel.NUMBA_ENABLED:
        def run_numba():
            _stage_apply(x, tabs, sq, c_out, kh, kw)

        t_nb = _time(run_numba, repeats)
        rows.append(("table stage 8ch (numba)", t_nb, rows[0][1] / t_nb))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--size", type=int, default=512)
    ap.add_argument("--scale", type=float, default=4.0)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args(argv)
    print(f"backend={accel.backend_name()} size={args.size} repeats={args.repeats}")
    rows = bench_resize(args.size, args.scale, args.repeats)
    rows += bench_stage(args.size, args.repeats)
    print(f"{'kernel':40s} {'best_s':>10s} {'speedup':>8s}")
    for name, secs, speedup in rows:
        extra = f"{speedup:8.1f}" if speedup else f"{'-':>8s}"
        print(f"{name:40s} {secs:10.4f} {extra}")


if __name__ == "__main__":
    main()
