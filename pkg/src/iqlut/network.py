"""Float reference path: per-pixel subnetworks, tap scatter, residual gating,
pixel shuffle, and the full low-to-high-resolution composition.

Every stage maps each input-channel scalar through its own subnetwork to a
(k_h*k_w*C_out)-vector per pixel; tap (i, j) of the vector emitted at source
pixel (p, q) accumulates into output pixel (p-i, q-j), i.e. the output at
(y, x) triple-sums taps gathered from sources (y+i, x+j) over i, j, and input
channels. Taps falling outside the same-size output map are dropped.

The quantized mode replaces exact subnetwork evaluation with the companded
bidirectional-rounding lookup over per-level subnetwork outputs, fused by the
fractional grid position; this is the in-memory twin of table inference.
"""

import numpy as np

from .errors import ConfigError, DataError
from .imaging import ImagePlane
from .model import Model, ModelSpec, StageParams, SubnetParams
from .quantize import ActRange, NonUniformQuantizer, grid_split
from .resize import resize


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def subnet_forward(net: SubnetParams, x: float) -> np.ndarray:
    """Evaluate one subnetwork at a scalar input."""
    if not np.isfinite(x):
        raise DataError(f"subnet input must be finite, got {x}")
    a1 = np.maximum(net.w1[:, 0] * x + net.b1, 0.0)
    a2 = np.maximum(net.w2 @ a1 + net.b2, 0.0)
    return net.w3 @ a2 + net.b3


def subnet_batch(net: SubnetParams, xs: np.ndarray) -> np.ndarray:
    """Vectorized subnet evaluation: (n,) inputs -> (n, entry_width)."""
    xs = np.asarray(xs, dtype=np.float64).ravel()
    a1 = np.maximum(xs[:, None] * net.w1[:, 0][None, :] + net.b1, 0.0)
    a2 = np.maximum(a1 @ net.w2.T + net.b2, 0.0)
    return a2 @ net.w3.T + net.b3


def scatter_taps(emitted: np.ndarray, c_out: int, kh: int, kw: int) -> np.ndarray:
    """Accumulate per-pixel tap vectors into a same-size output map.

    emitted: (batch, H, W, c_out*kh*kw), the summed vectors of all input
    channels at each source pixel. Returns (batch, c_out, H, W).
    """
    b, h, w, width = emitted.shape
    if width != c_out * kh * kw:
        raise ConfigError(f"entry width {width} != {c_out}*{kh}*{kw}")
    taps = emitted.reshape(b, h, w, c_out, kh, kw)
    out = np.zeros((b, c_out, h, w), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            sl = taps[:, i:, j:, :, i, j]  # sources (y+i, x+j) for outputs (y, x)
            out[:, :, : h - i, : w - j] += np.moveaxis(sl, 3, 1)
    return out


def gather_taps(d_out: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """Adjoint of scatter_taps: (batch, c_out, H, W) -> (batch, H, W, c_out*kh*kw)."""
    b, c_out, h, w = d_out.shape
    grad = np.zeros((b, h, w, c_out, kh, kw), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            grad[:, i:, j:, :, i, j] = np.moveaxis(d_out[:, :, : h - i, : w - j], 1, 3)
    return grad.reshape(b, h, w, c_out * kh * kw)


def expanded_conv(block_in: np.ndarray, stage: StageParams, spec: ModelSpec,
                  stage_idx: int) -> np.ndarray:
    """Single-sample float stage: (c_in, H, W) -> (c_out, H, W)."""
    c_in, c_out = spec.stage_channels(stage_idx)
    if block_in.shape[0] != c_in or len(stage.subnets) != c_in:
        raise ConfigError(
            f"stage {stage_idx} expects {c_in} input channels, got {block_in.shape[0]}"
        )
    return _stage_emit_float(block_in[None], stage, spec, stage_idx)[0]


def _stage_emit_float(x: np.ndarray, stage: StageParams, spec: ModelSpec,
                      stage_idx: int) -> np.ndarray:
    """(batch, c_in, H, W) float stage evaluation via exact subnets."""
    b, c_in, h, w = x.shape
    kh, kw = spec.kernel
    _, c_out = spec.stage_channels(stage_idx)
    width = spec.entry_width(stage_idx)
    emitted = np.zeros((b, h, w, width), dtype=np.float64)
    for c, net in enumerate(stage.subnets):
        vecs = subnet_batch(net, x[:, c].ravel())
        emitted += vecs.reshape(b, h, w, width)
    return scatter_taps(emitted, c_out, kh, kw)


def stage_tables_float(stage: StageParams, q: NonUniformQuantizer,
                       act: ActRange) -> list[np.ndarray]:
    """Per-channel (n_levels, entry_width) subnet outputs at the grid-level
    preimages; the exact-valued counterpart of a stored table."""
    inputs = act.denormalize(q.level_preimages())
    return [subnet_batch(net, inputs) for net in stage.subnets]


def apply_tables_stage(x: np.ndarray, tables: list[np.ndarray],
                       q: NonUniformQuantizer, act: ActRange, c_out: int,
                       kh: int, kw: int) -> np.ndarray:
    """(batch, c_in, H, W) stage evaluation through per-level tables.

    Each channel scalar is range-normalized, companded, rounded both ways,
    and the two table rows are fused by the fractional grid position; fused
    vectors are summed over channels and tap-scattered.
    """
    b, c_in, h, w = x.shape
    if len(tables) != c_in:
        raise ConfigError(f"{len(tables)} tables for {c_in} input channels")
    n = q.half_levels
    emitted = np.zeros((b, h, w, c_out * kh * kw), dtype=np.float64)
    for c in range(c_in):
        k_floor, k_ceil, t, _xt = grid_split(q, act.normalize(x[:, c].ravel()))
        t = t[:, None]
        rows = (1.0 - t) * tables[c][k_floor + n] + t * tables[c][k_ceil + n]
        emitted += rows.reshape(b, h, w, -1)
    return scatter_taps(emitted, c_out, kh, kw)


def residual_blend(x: np.ndarray, fx: np.ndarray, alpha: float) -> np.ndarray:
    """Convex combination (1-sig(alpha))*x + sig(alpha)*fx."""
    if x.shape != fx.shape:
        raise ConfigError(f"blend shapes differ: {x.shape} vs {fx.shape}")
    s = sigmoid(alpha)
    return (1.0 - s) * x + s * fx


def pixel_shuffle(feat: np.ndarray, s: int) -> np.ndarray:
    """(batch, s*s, H, W) -> (batch, s*H, s*W) with row-major sub-pixel order."""
    b, c, h, w = feat.shape
    if c != s * s:
        raise ConfigError(f"pixel shuffle needs {s * s} channels, got {c}")
    return (feat.reshape(b, s, s, h, w)
                .transpose(0, 3, 1, 4, 2)
                .reshape(b, h * s, w * s))


def pixel_unshuffle(plane: np.ndarray, s: int) -> np.ndarray:
    """Adjoint/inverse of pixel_shuffle: (batch, s*H, s*W) -> (batch, s*s, H, W)."""
    b, hs, ws = plane.shape
    if hs % s or ws % s:
        raise ConfigError(f"plane {hs}x{ws} not divisible by shuffle factor {s}")
    h, w = hs // s, ws // s
    return (plane.reshape(b, h, s, w, s)
                 .transpose(0, 2, 4, 1, 3)
                 .reshape(b, s * s, h, w))


def upsample_block(feat: np.ndarray, stage: StageParams, spec: ModelSpec) -> np.ndarray:
    """Final stage: expanded conv emitting upscale^2 channels, then shuffle."""
    emitted = _stage_emit_float(feat[None] if feat.ndim == 3 else feat, stage,
                                spec, spec.layers)
    out = pixel_shuffle(emitted, spec.upscale)
    return out[0] if feat.ndim == 3 else out


def _broadcast_residual(x: np.ndarray, c_out: int) -> np.ndarray:
    """Residual input for a stage whose channel count changes (first block:
    the single input plane feeds every output channel)."""
    if x.shape[1] == c_out:
        return x
    if x.shape[1] == 1:
        return np.broadcast_to(x, (x.shape[0], c_out) + x.shape[2:])
    raise ConfigError(f"cannot carry a {x.shape[1]}-channel residual to {c_out} channels")


def forward_batch(x: np.ndarray, model: Model, mode: str = "float",
                  quant=None, tables=None):
    """Residual-stack forward on a (batch, 1, H, W) input batch.

    Returns (hr_residual (batch, sH, sW), per-stage blended outputs). In
    quantized mode the per-stage lookup tables come from `tables` when given
    (dequantized stored entries) or are built from the float subnets.
    """
    spec = model.spec
    if mode not in ("float", "quantized"):
        raise ConfigError(f"mode must be 'float' or 'quantized', got {mode!r}")
    if mode == "quantized":
        if quant is None or len(quant) != spec.n_stages:
            raise ConfigError("quantized mode needs one quantizer state per stage")
    feats = []
    kh, kw = spec.kernel
    for i in range(spec.layers):
        stage = model.stages[i]
        _, c_out = spec.stage_channels(i)
        if mode == "float":
            fx = _stage_emit_float(x, stage, spec, i)
        else:
            sq = quant[i]
            tabs = tables[i] if tables is not None else stage_tables_float(stage, sq.q, sq.act)
            fx = apply_tables_stage(x, tabs, sq.q, sq.act, c_out, kh, kw)
        x = residual_blend(_broadcast_residual(x, c_out), fx, stage.alpha)
        feats.append(x)
    up = model.stages[spec.layers]
    if mode == "float":
        emitted = _stage_emit_float(x, up, spec, spec.layers)
    else:
        sq = quant[spec.layers]
        tabs = (tables[spec.layers] if tables is not None
                else stage_tables_float(up, sq.q, sq.act))
        emitted = apply_tables_stage(x, tabs, sq.q, sq.act,
                                     spec.upscale * spec.upscale, kh, kw)
    return pixel_shuffle(emitted, spec.upscale), feats


def forward_full(lr: ImagePlane, model: Model, mode: str = "float",
                 quant=None, collect_feats: bool = False):
    """LR plane -> SR plane: residual stack plus the bilinear base, clamped."""
    model.validate()
    residual, feats = forward_batch(lr.data[None, None], model, mode, quant)
    base = resize(lr, float(model.spec.upscale), "bilinear")
    out = ImagePlane(np.clip(residual[0] + base.data, 0.0, 1.0))
    return (out, feats) if collect_feats else out
