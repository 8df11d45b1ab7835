"""Desk-scale training with closed-form gradients.

All gradients are hand-derived: affine+ReLU chains, the tap scatter (whose
adjoint is a gather), the residual gate (including its logit), and pixel
shuffle (a permutation). Quantization-aware fine-tuning reports the loss of
the quantized forward but updates with straight-through gradients, i.e. the
exact gradients of the same loss evaluated on the float forward, treating
the companding/rounding/fusion stack as identity.
"""

import hashlib
import json
import os
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, DataError, DivergenceError, IntegrityError
from .model import (Model, ModelSpec, StageParams, SubnetParams, init_model,
                    named_params, zero_grads)
from .network import (forward_batch, gather_taps, pixel_shuffle,
                      pixel_unshuffle, scatter_taps, sigmoid)
from .quantize import StageQuant
from .resize import resize_batch

DECAY_MILESTONES = (0.2, 0.4, 0.6, 0.8)


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 16
    crop: int = 48
    lr: float = 1e-4
    decay_milestones: tuple[float, ...] = DECAY_MILESTONES
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    mse_w: float = 1.0
    distill_w: float = 3.0
    seed: int = 0
    stage: str = "pretrain"  # pretrain | finetune
    distill_mode: str = "both"  # both | features | output

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ConfigError(f"unknown training stage {self.stage!r}")
        if self.distill_mode not in ("both", "features", "output"):
            raise ConfigError(f"unknown distill mode {self.distill_mode!r}")
        if self.iterations < 0 or self.batch_size < 1 or self.crop < 1:
            raise ConfigError("iterations must be >= 0; batch and crop >= 1")


def schedule_lr(cfg: TrainConfig, iteration: int) -> float:
    """Initial rate halved at each milestone fraction of the total run."""
    if cfg.iterations <= 0:
        return cfg.lr
    halvings = sum(1 for m in cfg.decay_milestones if iteration >= m * cfg.iterations)
    return cfg.lr * (0.5 ** halvings)


# ------------------------------------------------------------ forward/backward

def _subnet_fwd(net: SubnetParams, z: np.ndarray):
    pre1 = z[:, None] * net.w1[:, 0][None, :] + net.b1
    a1 = np.maximum(pre1, 0.0)
    pre2 = a1 @ net.w2.T + net.b2
    a2 = np.maximum(pre2, 0.0)
    y = a2 @ net.w3.T + net.b3
    return y, (z, pre1 > 0, a1, pre2 > 0, a2)


def _subnet_bwd(net: SubnetParams, cache, d_y: np.ndarray, grads: dict, prefix: str):
    z, m1, a1, m2, a2 = cache
    grads[prefix + "w3"] += d_y.T @ a2
    grads[prefix + "b3"] += d_y.sum(axis=0)
    d_pre2 = (d_y @ net.w3) * m2
    grads[prefix + "w2"] += d_pre2.T @ a1
    grads[prefix + "b2"] += d_pre2.sum(axis=0)
    d_pre1 = (d_pre2 @ net.w2) * m1
    grads[prefix + "w1"][:, 0] += d_pre1.T @ z
    grads[prefix + "b1"] += d_pre1.sum(axis=0)
    return d_pre1 @ net.w1[:, 0]


def _stage_fwd(x: np.ndarray, stage: StageParams, spec: ModelSpec, idx: int):
    b, c_in, h, w = x.shape
    width = spec.entry_width(idx)
    _, c_out = spec.stage_channels(idx)
    emitted = np.zeros((b * h * w, width), dtype=np.float64)
    caches = []
    for c, net in enumerate(stage.subnets):
        y, cache = _subnet_fwd(net, x[:, c].ravel())
        emitted += y
        caches.append(cache)
    f = scatter_taps(emitted.reshape(b, h, w, width), c_out, *spec.kernel)
    return f, caches


def _stage_bwd(d_f: np.ndarray, stage: StageParams, spec: ModelSpec, idx: int,
               grads: dict, caches, in_shape) -> np.ndarray:
    b, c_in, h, w = in_shape
    d_emit = gather_taps(d_f, *spec.kernel)
    d_flat = d_emit.reshape(b * h * w, -1)
    d_x = np.empty(in_shape, dtype=np.float64)
    for c, net in enumerate(stage.subnets):
        d_z = _subnet_bwd(net, caches[c], d_flat, grads, f"s{idx}.c{c}.")
        d_x[:, c] = d_z.reshape(b, h, w)
    return d_x


def bilinear_base(lr_batch: np.ndarray, upscale: int) -> np.ndarray:
    """(batch, 1, h, w) -> (batch, s*h, s*w) interpolation baseline."""
    return resize_batch(lr_batch[:, 0], float(upscale), "bilinear")


def forward_train(model: Model, lr_batch: np.ndarray):
    """Float forward, unclamped, with everything backward needs cached.

    Returns (pred (b, sh, sw), per-stage blended outputs, cache).
    """
    spec = model.spec
    x = lr_batch
    feats = []
    stage_records = []
    for i in range(spec.layers):
        stage = model.stages[i]
        _, c_out = spec.stage_channels(i)
        f, caches = _stage_fwd(x, stage, spec, i)
        broadcast = x.shape[1] != c_out
        r = np.broadcast_to(x, f.shape) if broadcast else x
        sig = sigmoid(stage.alpha)
        x_next = (1.0 - sig) * r + sig * f
        stage_records.append((caches, x.shape, f, r, sig, broadcast))
        feats.append(x_next)
        x = x_next
    f_up, caches_up = _stage_fwd(x, model.stages[spec.layers], spec, spec.layers)
    residual = pixel_shuffle(f_up, spec.upscale)
    base = bilinear_base(lr_batch, spec.upscale)
    pred = residual + base
    cache = (stage_records, x.shape, caches_up)
    return pred, feats, cache


def backward_train(model: Model, cache, d_pred: np.ndarray, d_feats=None) -> dict:
    """Gradients of a scalar loss given d(loss)/d(pred) and optional
    d(loss)/d(stage output) injections."""
    spec = model.spec
    stage_records, up_in_shape, caches_up = cache
    grads = zero_grads(model)
    d_fup = pixel_unshuffle(d_pred, spec.upscale)
    d_x = _stage_bwd(d_fup, model.stages[spec.layers], spec, spec.layers,
                     grads, caches_up, up_in_shape)
    for i in range(spec.layers - 1, -1, -1):
        if d_feats is not None and d_feats[i] is not None:
            d_x = d_x + d_feats[i]
        caches, in_shape, f, r, sig, broadcast = stage_records[i]
        stage = model.stages[i]
        grads[f"s{i}.alpha"] += np.sum(d_x * (f - r)) * sig * (1.0 - sig)
        d_r = (1.0 - sig) * d_x
        d_f = sig * d_x
        d_resid = d_r.sum(axis=1, keepdims=True) if broadcast else d_r
        d_x = d_resid + _stage_bwd(d_f, stage, spec, i, grads, caches, in_shape)
    return grads


# ------------------------------------------------------------------- losses

def loss_total(pred: np.ndarray, target: np.ndarray, cfg: TrainConfig,
               student_feats=None, teacher_feats=None, teacher_pred=None):
    """Weighted MSE plus the distillation term, with gradients.

    Returns (loss, terms, d_pred, d_feats). The distillation term averages
    the per-block feature MSEs and the final-output MSE against the frozen
    teacher, per `cfg.distill_mode`.
    """
    if pred.shape != target.shape:
        raise ConfigError(f"pred {pred.shape} vs target {target.shape}")
    n = pred.size
    diff = pred - target
    mse = float(np.mean(diff * diff))
    loss = cfg.mse_w * mse
    d_pred = (2.0 * cfg.mse_w / n) * diff
    d_feats = None
    distill = 0.0
    if teacher_feats is not None or teacher_pred is not None:
        parts = []
        if cfg.distill_mode in ("both", "features"):
            if teacher_feats is None or student_feats is None:
                raise ConfigError("feature distillation needs student and teacher features")
            if len(teacher_feats) != len(student_feats):
                raise ConfigError(
                    f"student has {len(student_feats)} blocks, teacher {len(teacher_feats)}"
                )
            parts.extend(("feat", i) for i in range(len(student_feats)))
        if cfg.distill_mode in ("both", "output"):
            if teacher_pred is None:
                raise ConfigError("output distillation needs the teacher prediction")
            parts.append(("out", -1))
        k = len(parts)
        d_feats = [None] * (len(student_feats) if student_feats is not None else 0)
        for kind, i in parts:
            if kind == "feat":
                s, t = student_feats[i], teacher_feats[i]
                if s.shape != t.shape:
                    raise ConfigError(f"block {i} features {s.shape} vs teacher {t.shape}")
                fd = s - t
                distill += float(np.mean(fd * fd)) / k
                d_feats[i] = (2.0 * cfg.distill_w / (fd.size * k)) * fd
            else:
                od = pred - teacher_pred
                distill += float(np.mean(od * od)) / k
                d_pred = d_pred + (2.0 * cfg.distill_w / (od.size * k)) * od
        loss += cfg.distill_w * distill
    terms = {"mse": mse, "distill": distill}
    return loss, terms, d_pred, d_feats


def training_loss(model: Model, lr_batch: np.ndarray, hr_batch: np.ndarray,
                  cfg: TrainConfig, teacher_feats=None, teacher_pred=None):
    """Float-forward loss and its exact gradients (the surrogate that
    straight-through fine-tuning descends)."""
    pred, feats, cache = forward_train(model, lr_batch)
    loss, terms, d_pred, d_feats = loss_total(
        pred, hr_batch, cfg, student_feats=feats,
        teacher_feats=teacher_feats, teacher_pred=teacher_pred)
    grads = backward_train(model, cache, d_pred, d_feats)
    return loss, terms, grads


# --------------------------------------------------------------------- adam

@dataclass
class TrainState:
    model: Model
    config: TrainConfig
    iteration: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    rng: np.random.Generator = None
    quant: list[StageQuant] | None = None  # set for finetune

    def __post_init__(self):
        if self.rng is None:
            self.rng = np.random.default_rng(self.config.seed)
        for name, arr in named_params(self.model):
            self.m.setdefault(name, np.zeros_like(arr))
            self.v.setdefault(name, np.zeros_like(arr))


def adam_step(state: TrainState, grads: dict, lr: float) -> None:
    cfg = state.config
    t = state.iteration + 1
    bc1 = 1.0 - cfg.beta1 ** t
    bc2 = 1.0 - cfg.beta2 ** t
    for name, arr in named_params(state.model):
        g = grads[name]
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * (g * g)
        arr -= lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


def teacher_targets(teacher: Model, teacher_quant, lr_batch: np.ndarray,
                    base: np.ndarray):
    """Frozen-teacher block outputs and prediction on this batch."""
    residual, feats = forward_batch(lr_batch, teacher, "quantized", teacher_quant)
    return feats, residual + base


def train_step(state: TrainState, lr_batch: np.ndarray, hr_batch: np.ndarray,
               teacher: Model | None = None, teacher_quant=None) -> dict:
    """One optimization step; returns a loss record for the log."""
    cfg = state.config
    lr_now = schedule_lr(cfg, state.iteration)
    use_teacher = (teacher is not None and cfg.stage == "finetune"
                   and cfg.distill_w != 0.0)
    t_feats = t_pred = None
    if use_teacher:
        if teacher_quant is None:
            raise ConfigError("teacher model needs its quantizer states")
        base = bilinear_base(lr_batch, state.model.spec.upscale)
        t_feats, t_pred = teacher_targets(teacher, teacher_quant, lr_batch, base)
    if cfg.stage == "finetune" and state.quant is None:
        raise ConfigError("finetune requires calibrated quantizer states")

    loss, terms, grads = training_loss(state.model, lr_batch, hr_batch, cfg,
                                       teacher_feats=t_feats, teacher_pred=t_pred)
    record = {"iteration": state.iteration, "lr": lr_now, "stage": cfg.stage,
              "surrogate_loss": loss, **terms}
    if cfg.stage == "finetune":
        # reported loss comes from the quantized forward the deployment runs
        base = bilinear_base(lr_batch, state.model.spec.upscale)
        residual_q, feats_q = forward_batch(lr_batch, state.model, "quantized",
                                            state.quant)
        pred_q = residual_q + base
        loss_q, terms_q, _, _ = loss_total(pred_q, hr_batch, cfg,
                                           student_feats=feats_q,
                                           teacher_feats=t_feats,
                                           teacher_pred=t_pred)
        record["loss"] = loss_q
        record["mse_quantized"] = terms_q["mse"]
    else:
        record["loss"] = loss
    if not np.isfinite(record["loss"]) or not np.isfinite(loss):
        raise DivergenceError(f"non-finite loss at iteration {state.iteration}")
    adam_step(state, grads, lr_now)
    state.iteration += 1
    return record


def train_loop(state: TrainState, batches, teacher: Model | None = None,
               teacher_quant=None, log=None) -> list[dict]:
    records = []
    while state.iteration < state.config.iterations:
        lr_batch, hr_batch = next(batches)
        rec = train_step(state, lr_batch, hr_batch, teacher, teacher_quant)
        records.append(rec)
        if log is not None:
            log(rec)
    return records


def params_hash(model: Model) -> str:
    h = hashlib.sha256()
    for name, arr in named_params(model):
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
    return h.hexdigest()


def distill(student: TrainState, teacher: Model, teacher_quant, batches,
            log=None) -> list[dict]:
    """Fine-tune the student against a frozen teacher; the teacher is hashed
    before and after to prove it never moved."""
    if student.config.stage != "finetune":
        raise ConfigError("distillation runs in the finetune stage")
    if teacher.spec.layers != student.model.spec.layers:
        raise ConfigError(
            f"teacher has {teacher.spec.layers} blocks, student "
            f"{student.model.spec.layers}"
        )
    before = params_hash(teacher)
    records = train_loop(student, batches, teacher, teacher_quant, log)
    if params_hash(teacher) != before:
        raise IntegrityError("teacher parameters changed during distillation")
    return records


# -------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"IQCKPT1"
CKPT_VERSION = 1


def _spec_dict(spec: ModelSpec) -> dict:
    return {"layers": spec.layers, "channels": spec.channels,
            "upscale": spec.upscale, "kernel": list(spec.kernel),
            "block_bits": list(spec.block_bits), "out_bits": spec.out_bits}


def _spec_from_dict(d: dict) -> ModelSpec:
    return ModelSpec(d["layers"], d["channels"], d["upscale"],
                     tuple(d["kernel"]), tuple(d["block_bits"]), d["out_bits"])


def save_checkpoint(state: TrainState, path) -> None:
    arrays = [(name, arr) for name, arr in named_params(state.model)]
    arrays += [(f"adam.m.{n}", a) for n, a in state.m.items()]
    arrays += [(f"adam.v.{n}", a) for n, a in state.v.items()]
    meta = {
        "spec": _spec_dict(state.model.spec),
        "config": asdict(state.config),
        "iteration": state.iteration,
        "rng_state": state.rng.bit_generator.state,
        "quant": None if state.quant is None else [
            {"a": sq.q.a, "b": sq.q.b, "bits": sq.q.bits,
             "lo": sq.act.lo, "hi": sq.act.hi} for sq in state.quant
        ],
        "arrays": [[name, list(arr.shape)] for name, arr in arrays],
    }
    meta_blob = json.dumps(meta, sort_keys=True).encode()
    buf = bytearray()
    buf += CKPT_MAGIC
    buf += struct.pack("<HI", CKPT_VERSION, len(meta_blob))
    buf += meta_blob
    for _, arr in arrays:
        buf += np.ascontiguousarray(arr, dtype="<f8").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)))
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(bytes(buf))
    os.replace(tmp, path)


def load_checkpoint(path) -> TrainState:
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise DataError(f"cannot read checkpoint: {path}") from exc
    head = len(CKPT_MAGIC)
    if blob[:head] != CKPT_MAGIC:
        raise IntegrityError("bad checkpoint magic")
    (stored,) = struct.unpack("<I", blob[-4:])
    if zlib.crc32(blob[:-4]) != stored:
        raise IntegrityError("checkpoint checksum mismatch")
    version, meta_len = struct.unpack_from("<HI", blob, head)
    if version != CKPT_VERSION:
        raise IntegrityError(f"unsupported checkpoint version {version}")
    off = head + 6
    meta = json.loads(blob[off:off + meta_len].decode())
    off += meta_len
    spec = _spec_from_dict(meta["spec"])
    cfg_d = meta["config"]
    cfg_d["decay_milestones"] = tuple(cfg_d["decay_milestones"])
    cfg = TrainConfig(**cfg_d)
    model = init_model(spec, seed=0)
    named = dict(named_params(model))
    m: dict = {}
    v: dict = {}
    for name, shape in meta["arrays"]:
        size = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off).reshape(shape)
        off += size * 8
        if name.startswith("adam.m."):
            m[name[len("adam.m."):]] = arr.copy()
        elif name.startswith("adam.v."):
            v[name[len("adam.v."):]] = arr.copy()
        elif name in named:
            named[name][...] = arr
        else:
            raise IntegrityError(f"checkpoint array {name!r} has no home")
    if off != len(blob) - 4:
        raise IntegrityError("checkpoint trailing bytes after arrays")
    quant = None
    if meta["quant"] is not None:
        from .quantize import ActRange, NonUniformQuantizer
        quant = [StageQuant(NonUniformQuantizer(d["a"], d["b"], d["bits"]),
                            ActRange(d["lo"], d["hi"])) for d in meta["quant"]]
    rng = np.random.default_rng(cfg.seed)
    rng.bit_generator.state = meta["rng_state"]
    return TrainState(model=model, config=cfg, iteration=meta["iteration"],
                      m=m, v=v, rng=rng, quant=quant)
