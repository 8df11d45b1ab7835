"""Lookup-table form of a trained model: building, storage accounting,
serialization, and table-driven inference.

One table per stage per input channel holds the subnetwork's output vector
at every quantizer grid level, output-quantized to `out_bits` integer codes
under a per-table affine. Inference replays the network with table fetches
plus dual-path fusion instead of subnetwork evaluation.

File layout (little-endian), checksummed with CRC-32 over everything before
the trailing checksum:

    magic     6s   "IQLUT1"
    version   u16  (currently 1)
    layers    u16
    channels  u16
    upscale   u16
    k_h, k_w  u16 each
    out_bits  u8
    pad       u8   (zero)
    stages    (layers + 1) records, each:
        bits    u8
        a, b, alpha, act_lo, act_hi   f32 each (alpha is 0 for the upsampler)
        tables  C_in records, each:
            out_scale, out_offset  f32 each
            codes   (2^bits - 1) * entry_width little-endian integers,
                    1 byte per code when out_bits <= 8, else 2 bytes
    checksum  u32
"""

import math
import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import accel
from .accel import njit
from .errors import ConfigError, DataError, IntegrityError
from .imaging import ImagePlane
from .model import Model, ModelSpec, SubnetParams
from .network import (_stage_emit_float, apply_tables_stage, forward_batch,
                      pixel_shuffle, residual_blend, sigmoid, stage_tables_float,
                      subnet_batch)
from .quantize import (DEFAULT_GRID, ActRange, NonUniformQuantizer, StageQuant,
                       greedy_search_ab, observed_range)
from .resize import resize

MAGIC = b"IQLUT1"
VERSION = 1
_HEADER = struct.Struct("<6sHHHHHHBB")
_STAGE_META = struct.Struct("<Bfffff")
_TABLE_META = struct.Struct("<ff")
_CHECKSUM = struct.Struct("<I")


def code_bytes(out_bits: int) -> int:
    if out_bits <= 8:
        return 1
    if out_bits <= 16:
        return 2
    raise ConfigError(f"out_bits {out_bits} exceeds 16")


@dataclass
class LutTable:
    """Output codes of one subnetwork over the quantizer grid."""

    codes: np.ndarray  # (n_levels, entry_width) unsigned integers
    out_scale: float
    out_offset: float
    out_bits: int

    @property
    def levels(self) -> int:
        return self.codes.shape[0]

    @property
    def entry_width(self) -> int:
        return self.codes.shape[1]

    def dequantized(self) -> np.ndarray:
        return self.codes.astype(np.float64) * self.out_scale + self.out_offset


@dataclass
class LutStage:
    bits: int
    a: float
    b: float
    alpha: float  # residual gate logit; ignored by the upsampler stage
    act: ActRange
    tables: list[LutTable]

    def quantizer(self) -> NonUniformQuantizer:
        return NonUniformQuantizer(self.a, self.b, self.bits)

    def stage_quant(self) -> StageQuant:
        return StageQuant(self.quantizer(), self.act)


@dataclass
class LutModel:
    spec: ModelSpec
    stages: list[LutStage]

    def validate(self) -> None:
        if len(self.stages) != self.spec.n_stages:
            raise IntegrityError(
                f"model has {len(self.stages)} stages, spec wants {self.spec.n_stages}"
            )
        for i, stage in enumerate(self.stages):
            c_in, _ = self.spec.stage_channels(i)
            width = self.spec.entry_width(i)
            levels = 2 ** stage.bits - 1
            if len(stage.tables) != c_in:
                raise IntegrityError(f"stage {i}: {len(stage.tables)} tables for {c_in} channels")
            for tab in stage.tables:
                if tab.codes.shape != (levels, width):
                    raise IntegrityError(
                        f"stage {i}: table shape {tab.codes.shape}, expected {(levels, width)}"
                    )
                if tab.codes.max(initial=0) >= 2 ** self.spec.out_bits:
                    raise IntegrityError(f"stage {i}: code overflows {self.spec.out_bits} bits")


def _f32(x: float) -> float:
    """Round through the file format's f32 so in-memory models and their
    serialized round trips compute identically."""
    return float(np.float32(x))


def build_lut(net: SubnetParams, sq: StageQuant, out_bits: int) -> LutTable:
    """Tabulate one subnetwork over the grid-level preimages and quantize the
    outputs to integer codes under a per-table min/max affine."""
    inputs = sq.act.denormalize(sq.q.level_preimages())
    values = subnet_batch(net, inputs)
    if not np.all(np.isfinite(values)):
        raise DataError("subnet produced non-finite outputs during tabulation")
    vmin = float(values.min())
    vmax = float(values.max())
    n_codes = 2 ** out_bits - 1
    # f32 affine chosen to bracket [vmin, vmax] so the half-step error bound
    # survives the file format's precision
    off32 = np.float32(vmin)
    if float(off32) > vmin:
        off32 = np.nextafter(off32, np.float32(-np.inf))
    offset = float(off32)
    if vmax > offset:
        sc32 = np.float32((vmax - offset) / n_codes)
        while offset + float(sc32) * n_codes < vmax:
            sc32 = np.nextafter(sc32, np.float32(np.inf))
        scale = float(sc32)
    else:
        scale = 1.0
    codes = np.floor((values - offset) / scale + 0.5).astype(np.int64)
    codes = np.clip(codes, 0, n_codes)
    dtype = np.uint8 if code_bytes(out_bits) == 1 else np.uint16
    return LutTable(codes=codes.astype(dtype), out_scale=scale,
                    out_offset=offset, out_bits=out_bits)


def convert_model(model: Model, quant: list[StageQuant],
                  out_bits: int | None = None) -> LutModel:
    """Tabulate every stage of a trained model."""
    model.validate()
    spec = model.spec
    if len(quant) != spec.n_stages:
        raise ConfigError(f"need {spec.n_stages} stage quantizers, got {len(quant)}")
    out_bits = spec.out_bits if out_bits is None else out_bits
    stages = []
    for i, stage in enumerate(model.stages):
        sq = quant[i]
        # stage metadata is rounded through the format's f32 up front, and the
        # tables are built against the rounded quantizer state, so the model
        # computes identically before and after a file round trip
        lo = _f32(sq.act.lo)
        hi = _f32(sq.act.hi)
        if hi - lo < 1e-12:
            hi = _f32(lo + 1.0)
        sq32 = StageQuant(NonUniformQuantizer(_f32(sq.q.a), _f32(sq.q.b), sq.q.bits),
                          ActRange(lo, hi))
        tables = [build_lut(net, sq32, out_bits) for net in stage.subnets]
        stages.append(LutStage(bits=sq.q.bits, a=sq32.q.a, b=sq32.q.b,
                               alpha=0.0 if stage.alpha is None else _f32(stage.alpha),
                               act=sq32.act, tables=tables))
    lm = LutModel(spec=ModelSpec(spec.layers, spec.channels, spec.upscale, spec.kernel,
                                 tuple(s.q.bits for s in quant), out_bits),
                  stages=stages)
    lm.validate()
    return lm


# ---------------------------------------------------------------- calibration

def collect_stage_data(model: Model, planes: list[ImagePlane],
                       max_pixels: int = 20000):
    """Float-path activations feeding every stage over a calibration set.

    Returns (inputs, float_outputs): per stage, the stacked (n, c_in, h, w)
    inputs and the exact stage responses they produce. Inputs to stage 0 are
    the calibration planes themselves; later stages see the blended outputs
    of their predecessor. Large sets are truncated to bound the cost.
    """
    if not planes:
        raise DataError("calibration set is empty")
    spec = model.spec
    inputs = [[] for _ in range(spec.n_stages)]
    seen = 0
    for plane in planes:
        x = plane.data[None, None]
        _, feats = forward_batch(x, model, "float")
        stage_ins = [x] + [f for f in feats]
        for i in range(spec.n_stages):
            inputs[i].append(stage_ins[i][0])
        seen += plane.data.size
        if seen >= max_pixels:
            break
    outputs = []
    for i in range(spec.n_stages):
        outs = [_stage_emit_float(arr[None], model.stages[i], spec, i)[0]
                for arr in inputs[i]]
        outputs.append(outs)
    return inputs, outputs


def search_stage_ab(stage, inputs, float_outputs, act: ActRange, bits: int,
                    spec: ModelSpec, stage_idx: int, grid=DEFAULT_GRID):
    """Greedy (a, b) minimizing the stage's quantized-vs-float output MSE."""
    kh, kw = spec.kernel
    _, c_out = spec.stage_channels(stage_idx)

    def objective(a, b):
        q = NonUniformQuantizer(a, b, bits)
        tabs = stage_tables_float(stage, q, act)
        err = 0.0
        count = 0
        for arr, ref in zip(inputs, float_outputs):
            got = apply_tables_stage(arr[None], tabs, q, act, c_out, kh, kw)[0]
            err += float(np.sum((got - ref) ** 2))
            count += ref.size
        return err / count

    return greedy_search_ab(objective, grid)


def calibrate(model: Model, planes: list[ImagePlane], bits_plan=None,
              pin_ab=None, search: bool = True, grid=DEFAULT_GRID,
              share_ab: bool = False) -> list[StageQuant]:
    """Calibrated quantizer state for every stage.

    Activation ranges come from observed float-path min/max. Breakpoints are
    pinned, greedily searched per stage, or (share_ab) searched once for the
    whole model by summing the per-stage objectives.
    """
    model.validate()
    spec = model.spec
    bits_plan = tuple(bits_plan) if bits_plan is not None else spec.block_bits
    if len(bits_plan) != spec.n_stages:
        raise ConfigError(f"bits plan needs {spec.n_stages} entries, got {len(bits_plan)}")
    inputs, outputs = collect_stage_data(model, planes)
    ranges = [observed_range(arrs) for arrs in inputs]
    if pin_ab is not None:
        a, b = pin_ab
        return [StageQuant(NonUniformQuantizer(a, b, bits_plan[i]), ranges[i])
                for i in range(spec.n_stages)]
    if not search:
        return [StageQuant(NonUniformQuantizer(0.5, 0.5, bits_plan[i]), ranges[i])
                for i in range(spec.n_stages)]
    if share_ab:
        kh, kw = spec.kernel

        def objective(a, b):
            total = 0.0
            for i in range(spec.n_stages):
                q = NonUniformQuantizer(a, b, bits_plan[i])
                tabs = stage_tables_float(model.stages[i], q, ranges[i])
                _, c_out = spec.stage_channels(i)
                for arr, ref in zip(inputs[i], outputs[i]):
                    got = apply_tables_stage(arr[None], tabs, q, ranges[i],
                                             c_out, kh, kw)[0]
                    total += float(np.mean((got - ref) ** 2))
            return total

        a, b = greedy_search_ab(objective, grid)
        return [StageQuant(NonUniformQuantizer(a, b, bits_plan[i]), ranges[i])
                for i in range(spec.n_stages)]
    out = []
    for i in range(spec.n_stages):
        a, b = search_stage_ab(model.stages[i], inputs[i], outputs[i], ranges[i],
                               bits_plan[i], spec, i, grid)
        out.append(StageQuant(NonUniformQuantizer(a, b, bits_plan[i]), ranges[i]))
    return out


# ---------------------------------------------------------------- accounting

def header_bytes(spec: ModelSpec) -> int:
    """All non-code bytes: file header, stage/table metadata, checksum."""
    total = _HEADER.size + _CHECKSUM.size
    for i in range(spec.n_stages):
        c_in, _ = spec.stage_channels(i)
        total += _STAGE_META.size + c_in * _TABLE_META.size
    return total


def table_region_bytes(spec: ModelSpec) -> int:
    """Bytes occupied by table codes alone."""
    per_code = code_bytes(spec.out_bits)
    total = 0
    for i in range(spec.n_stages):
        c_in, _ = spec.stage_channels(i)
        levels = 2 ** spec.block_bits[i] - 1
        total += c_in * levels * spec.entry_width(i) * per_code
    return total


def lut_size_bytes(spec: ModelSpec) -> int:
    """Exact serialized size: code region plus the fixed metadata."""
    return table_region_bytes(spec) + header_bytes(spec)


# ------------------------------------------------------------- serialization

def serialize(lm: LutModel) -> bytes:
    lm.validate()
    spec = lm.spec
    buf = bytearray()
    buf += _HEADER.pack(MAGIC, VERSION, spec.layers, spec.channels, spec.upscale,
                        spec.kernel[0], spec.kernel[1], spec.out_bits, 0)
    wide = code_bytes(spec.out_bits) == 2
    for stage in lm.stages:
        buf += _STAGE_META.pack(stage.bits, stage.a, stage.b, stage.alpha,
                                stage.act.lo, stage.act.hi)
        for tab in stage.tables:
            buf += _TABLE_META.pack(tab.out_scale, tab.out_offset)
            buf += tab.codes.astype("<u2" if wide else "<u1").tobytes()
    buf += _CHECKSUM.pack(zlib.crc32(bytes(buf)))
    return bytes(buf)


def deserialize(blob: bytes) -> LutModel:
    if len(blob) < _HEADER.size + _CHECKSUM.size:
        raise IntegrityError("payload too short to be a LUT model file")
    magic = blob[: len(MAGIC)]
    if magic != MAGIC:
        raise IntegrityError(f"bad magic {magic!r}")
    (stored_crc,) = _CHECKSUM.unpack(blob[-_CHECKSUM.size:])
    if zlib.crc32(blob[: -_CHECKSUM.size]) != stored_crc:
        raise IntegrityError("checksum mismatch: file is corrupt")
    _, version, layers, channels, upscale, kh, kw, out_bits, _pad = _HEADER.unpack(
        blob[: _HEADER.size]
    )
    if version != VERSION:
        raise IntegrityError(f"unsupported format version {version}")
    off = _HEADER.size
    try:
        wide = code_bytes(out_bits) == 2
        # spec geometry must exist before stage channel counts are known
        probe_spec = ModelSpec(layers, channels, upscale, (kh, kw),
                               (2,) * (layers + 1), out_bits)
    except ConfigError as exc:
        raise IntegrityError(f"header geometry invalid: {exc}") from exc
    dtype = "<u2" if wide else "<u1"
    per_code = 2 if wide else 1
    stages = []
    bits_list = []
    for i in range(layers + 1):
        try:
            bits, a, b, alpha, lo, hi = _STAGE_META.unpack_from(blob, off)
        except struct.error as exc:
            raise IntegrityError("stage metadata truncated") from exc
        off += _STAGE_META.size
        if not (2 <= bits <= 16):
            raise IntegrityError(f"stage {i} bit-depth {bits} out of range")
        if not (0.0 < a < 1.0 and 0.0 < b < 1.0):
            raise IntegrityError(f"stage {i} breakpoints ({a}, {b}) out of range")
        c_in, _ = probe_spec.stage_channels(i)
        width = probe_spec.entry_width(i)
        levels = 2 ** bits - 1
        tables = []
        for _c in range(c_in):
            try:
                scale, offset = _TABLE_META.unpack_from(blob, off)
            except struct.error as exc:
                raise IntegrityError("table metadata truncated") from exc
            off += _TABLE_META.size
            nbytes = levels * width * per_code
            if off + nbytes > len(blob) - _CHECKSUM.size:
                raise IntegrityError("table region truncated")
            codes = np.frombuffer(blob, dtype=dtype, count=levels * width, offset=off)
            off += nbytes
            tables.append(LutTable(codes=codes.reshape(levels, width).copy(),
                                   out_scale=scale, out_offset=offset,
                                   out_bits=out_bits))
        try:
            act = ActRange(lo, hi)
            stages.append(LutStage(bits=bits, a=a, b=b, alpha=alpha, act=act,
                                   tables=tables))
        except ConfigError as exc:
            raise IntegrityError(f"stage {i} metadata invalid: {exc}") from exc
        bits_list.append(bits)
    if off != len(blob) - _CHECKSUM.size:
        raise IntegrityError("trailing bytes after table region")
    lm = LutModel(spec=ModelSpec(layers, channels, upscale, (kh, kw),
                                 tuple(bits_list), out_bits),
                  stages=stages)
    lm.validate()
    return lm


def save(lm: LutModel, path) -> None:
    blob = serialize(lm)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load(path) -> LutModel:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read model file: {path}") from exc
    return deserialize(blob)


# ---------------------------------------------------------------- inference

@njit(cache=True)
def _stage_kernel(x, tabs, a, b, lo, hi, half, c_out, kh, kw, out):
    """Table-driven stage on one sample. x: (c_in, H, W); tabs: stacked
    (c_in, n_levels, entry_width); out: zeroed (c_out, H, W). Accumulation
    order matches the vectorized numpy path bit for bit."""
    c_in, h, w = x.shape
    width = tabs.shape[2]
    identity = a == b
    s_m = b / a
    s_o = (1.0 - b) / (1.0 - a)
    fused = np.empty(width)
    for p in range(h):
        for q in range(w):
            for e in range(width):
                fused[e] = 0.0
            for c in range(c_in):
                v = x[c, p, q]
                xn = 2.0 * (v - lo) / (hi - lo) - 1.0
                if xn < -1.0:
                    xn = -1.0
                elif xn > 1.0:
                    xn = 1.0
                if identity:
                    xt = xn
                else:
                    ax = abs(xn)
                    if ax < a:
                        xt = s_m * xn
                    else:
                        mag = b + s_o * (ax - a)
                        xt = mag if xn > 0.0 else (-mag if xn < 0.0 else 0.0)
                g = xt * half
                near = math.floor(g + 0.5)
                if abs(g - near) <= 1e-9:  # GRID_SNAP: treat as exactly on-grid
                    g = float(near)
                kf = int(math.floor(g))
                if kf < -half:
                    kf = -half
                elif kf > half:
                    kf = half
                kc = int(math.ceil(g))
                if kc < -half:
                    kc = -half
                elif kc > half:
                    kc = half
                t = g - kf
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
                rf = kf + half
                rc = kc + half
                for e in range(width):
                    fused[e] += (1.0 - t) * tabs[c, rf, e] + t * tabs[c, rc, e]
            for i in range(kh):
                y0 = p - i
                if y0 < 0:
                    continue
                for j in range(kw):
                    x0 = q - j
                    if x0 < 0:
                        continue
                    for co in range(c_out):
                        out[co, y0, x0] += fused[co * kh * kw + i * kw + j]


def _stage_apply(x: np.ndarray, tables: list[np.ndarray], sq: StageQuant,
                 c_out: int, kh: int, kw: int) -> np.ndarray:
    """Dispatch one (c_in, H, W) stage to the jitted or numpy path."""
    if accel.NUMBA_ENABLED:
        out = np.zeros((c_out, x.shape[1], x.shape[2]), dtype=np.float64)
        _stage_kernel(np.ascontiguousarray(x), np.ascontiguousarray(np.stack(tables)),
                      sq.q.a, sq.q.b, sq.act.lo, sq.act.hi, sq.q.half_levels,
                      c_out, kh, kw, out)
        return out
    return apply_tables_stage(x[None], tables, sq.q, sq.act, c_out, kh, kw)[0]


def lut_infer(lm: LutModel, lr: ImagePlane) -> ImagePlane:
    """Run the full table pipeline on an LR plane and add the bilinear base."""
    lm.validate()
    spec = lm.spec
    kh, kw = spec.kernel
    x = lr.data[None]
    for i in range(spec.layers):
        stage = lm.stages[i]
        tabs = [t.dequantized() for t in stage.tables]
        _, c_out = spec.stage_channels(i)
        fx = _stage_apply(x, tabs, stage.stage_quant(), c_out, kh, kw)
        res = np.broadcast_to(x, fx.shape) if x.shape[0] != c_out else x
        x = residual_blend(res, fx, stage.alpha)
    up = lm.stages[spec.layers]
    tabs = [t.dequantized() for t in up.tables]
    emitted = _stage_apply(x, tabs, up.stage_quant(),
                           spec.upscale * spec.upscale, kh, kw)
    residual = pixel_shuffle(emitted[None], spec.upscale)[0]
    base = resize(lr, float(spec.upscale), "bilinear")
    return ImagePlane(np.clip(residual + base.data, 0.0, 1.0))


def quantized_reference(lm: LutModel, model: Model, lr: ImagePlane) -> ImagePlane:
    """The in-memory oracle for lut_infer: same quantizers and fusion, but
    exact float subnet outputs at every grid level instead of stored codes."""
    quant = [s.stage_quant() for s in lm.stages]
    residual, _ = forward_batch(lr.data[None, None], model, "quantized", quant)
    base = resize(lr, float(lm.spec.upscale), "bilinear")
    return ImagePlane(np.clip(residual[0] + base.data, 0.0, 1.0))


def table_reference(lm: LutModel, lr: ImagePlane) -> ImagePlane:
    """In-memory vectorized execution of the stored tables (never the jitted
    kernel); lut_infer must reproduce it bit for bit on any backend."""
    spec = lm.spec
    kh, kw = spec.kernel
    x = lr.data[None]
    for i in range(spec.layers):
        stage = lm.stages[i]
        tabs = [t.dequantized() for t in stage.tables]
        _, c_out = spec.stage_channels(i)
        fx = apply_tables_stage(x[None], tabs, stage.quantizer(), stage.act,
                                c_out, kh, kw)[0]
        res = np.broadcast_to(x, fx.shape) if x.shape[0] != c_out else x
        x = residual_blend(res, fx, stage.alpha)
    up = lm.stages[spec.layers]
    tabs = [t.dequantized() for t in up.tables]
    emitted = apply_tables_stage(x[None], tabs, up.quantizer(), up.act,
                                 spec.upscale * spec.upscale, kh, kw)[0]
    residual = pixel_shuffle(emitted[None], spec.upscale)[0]
    base = resize(lr, float(spec.upscale), "bilinear")
    return ImagePlane(np.clip(residual + base.data, 0.0, 1.0))


def oracle_bound(lm: LutModel) -> float:
    """Worst-case |lut_infer - quantized_reference| per output value.

    Per stage, each fetched table value sits within half an output
    dequantization step of its float counterpart; a stage output accumulates
    k_h*k_w taps from every input channel, scaled by the residual gate. Input
    perturbations pass through the stage at a Lipschitz rate computable from
    the stored tables (max adjacent-entry difference over the grid spacing,
    times the companding and range-normalization gains). The propagated sum
    bounds the final divergence; the bilinear base and clamp add nothing.
    """
    spec = lm.spec
    kh, kw = spec.kernel
    err = 0.0
    for i, stage in enumerate(lm.stages):
        q = stage.quantizer()
        smax = max(q.s_m, q.s_o)
        gain = stage.act.gain
        half_steps = [tab.out_scale * 0.5 for tab in stage.tables]
        lips = []
        for tab in stage.tables:
            deq = tab.dequantized()
            diff = np.abs(np.diff(deq, axis=0)).max() if deq.shape[0] > 1 else 0.0
            lips.append(diff * q.half_levels * smax * gain)
        fetch_err = kh * kw * sum(half_steps)
        carry = kh * kw * sum(lips) * err
        if i < spec.layers:
            s = sigmoid(stage.alpha)
            err = (1.0 - s) * err + s * (fetch_err + carry)
        else:
            err = fetch_err + carry
    return float(err)
