"""Command-line surface: train, build-lut, infer, eval, search-ab, inspect.

Structured output is line-delimited JSON on stdout (human-oriented summary
lines start with '#'). Every run writes exactly one manifest recording the
resolved configuration, input hashes, and output paths. Exit codes: 0 ok,
2 configuration error, 3 data error, 4 integrity error, 5 divergence.
"""

import copy
import hashlib
import json
import os
import sys
import time

import click
import numpy as np

from . import __version__, accel
from .data import BatchIterator, BatchStream, list_images, load_luminance_dir
from .errors import ConfigError, DivergenceError, IqlutError
from .imaging import (ImagePlane, load_image, luminance, modcrop,
                      rgb_to_ycbcr, save_image, shave, ycbcr_to_rgb)
from .lut import (calibrate, convert_model, header_bytes, load as load_lut,
                  lut_infer, lut_size_bytes, oracle_bound, quantized_reference,
                  save as save_lut, table_region_bytes)
from .metrics import psnr, ssim
from .model import init_model, spec_from_name
from .resize import KERNELS, degrade, resize
from .train import (TrainConfig, TrainState, distill, load_checkpoint,
                    save_checkpoint, train_loop)

_THREADS_ENV = "IQLUT_THREADS"


def _configure_threads() -> int | None:
    raw = os.environ.get(_THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"{_THREADS_ENV} must be a positive integer, got {raw!r}")
    if accel.NUMBA_ENABLED:  # kernels are sequential; this only caps the pool
        import numba

        numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))
    return n


def _sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _hash_input(path) -> str:
    if os.path.isdir(path):
        h = hashlib.sha256()
        for p in list_images(path):
            h.update(os.path.basename(p).encode())
            h.update(_sha256_file(p).encode())
        return h.hexdigest()
    return _sha256_file(path)


def _emit(record: dict) -> None:
    click.echo(json.dumps(record, sort_keys=True))


def _atomic_write(path, blob: bytes) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def write_manifest(command: str, config: dict, inputs, outputs, started: float,
                   manifest_path=None) -> str:
    path = manifest_path or (f"{outputs[0]}.manifest.json" if outputs
                             else f"iqlut-{command}.manifest.json")
    record = {
        "command": command,
        "config": config,
        "inputs": {str(p): _hash_input(p) for p in inputs},
        "outputs": [str(p) for p in outputs],
        "tool_version": __version__,
        "backend": accel.backend_name(),
        "threads": os.environ.get(_THREADS_ENV),
        "wall_clock_s": round(time.time() - started, 3),
    }
    _atomic_write(path, (json.dumps(record, sort_keys=True) + "\n").encode())
    return path


@click.group()
def cli():
    """Lookup-table super-resolution toolkit."""


def _val_psnr(state, pairs) -> float:
    from .network import forward_batch
    from .train import bilinear_base

    mode = "quantized" if state.quant is not None else "float"
    vals = []
    for lr_crop, hr_crop in pairs:
        res, _ = forward_batch(lr_crop[None], state.model, mode, state.quant)
        pred = np.clip((res + bilinear_base(lr_crop[None],
                                            state.model.spec.upscale))[0], 0, 1)
        vals.append(psnr(ImagePlane(pred), ImagePlane(hr_crop)))
    return float(np.mean(vals))


def _parse_bits(text, n_stages) -> tuple[int, ...]:
    if text is None:
        return None
    try:
        bits = tuple(int(b) for b in text.split(","))
    except ValueError:
        raise ConfigError(f"--bits expects comma-separated integers, got {text!r}")
    if len(bits) == 1:
        bits = bits * n_stages
    if len(bits) != n_stages:
        raise ConfigError(f"--bits needs 1 or {n_stages} values, got {len(bits)}")
    return bits


@cli.command()
@click.option("--data", "data_dir", required=True, type=click.Path(), help="HR image directory")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--stage", type=click.Choice(["pretrain", "finetune"]), default="pretrain")
@click.option("--model", "model_name", default="IQ-L2C4", show_default=True)
@click.option("--scale", default=4, show_default=True)
@click.option("--kernel-size", default=2, show_default=True, help="tap window side")
@click.option("--iters", default=5000, show_default=True)
@click.option("--batch", default=16, show_default=True)
@click.option("--crop", default=48, show_default=True)
@click.option("--lr", default=1e-4, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--resume", type=click.Path(exists=False), default=None,
              help="checkpoint to initialize weights from (required for finetune; "
                   "the optimizer restarts)")
@click.option("--teacher", type=click.Path(exists=False), default=None,
              help="teacher checkpoint (finetune; defaults to the resumed model)")
@click.option("--calib", "calib_dir", type=click.Path(), default=None,
              help="calibration images for finetune (defaults to --data)")
@click.option("--bits", default=None, help="index bit plan, e.g. 4,3,3")
@click.option("--teacher-bits", default=8, show_default=True)
@click.option("--pin-ab", nargs=2, type=float, default=None)
@click.option("--share-ab", is_flag=True)
@click.option("--distill-mode", type=click.Choice(["both", "features", "output"]),
              default="both", show_default=True)
@click.option("--distill-w", default=3.0, show_default=True)
@click.option("--val-data", "val_dir", type=click.Path(), default=None,
              help="images for periodic eval PSNR in the log")
@click.option("--log-every", default=100, show_default=True)
@click.option("--manifest", "manifest_path", type=click.Path(), default=None)
def train(data_dir, out_path, stage, model_name, scale, kernel_size, iters, batch,
          crop, lr, seed, resume, teacher, calib_dir, bits, teacher_bits, pin_ab,
          share_ab, distill_mode, distill_w, val_dir, log_every, manifest_path):
    """Train a model: float pretraining or quantization-aware fine-tuning."""
    started = time.time()
    threads = _configure_threads()  # noqa: F841 - validated + recorded via env
    planes = [p.data for p in load_luminance_dir(data_dir)]
    cfg = TrainConfig(iterations=iters, batch_size=batch, crop=crop, lr=lr,
                      seed=seed, stage=stage, distill_mode=distill_mode,
                      distill_w=distill_w)
    inputs = [data_dir]
    teacher_model = teacher_quant = None
    if stage == "pretrain":
        if resume:
            state = load_checkpoint(resume)
            state = TrainState(model=state.model, config=cfg)
            inputs.append(resume)
        else:
            spec = spec_from_name(model_name, upscale=scale,
                                  kernel=(kernel_size, kernel_size))
            state = TrainState(model=init_model(spec, seed=seed), config=cfg)
    else:
        if not resume:
            raise ConfigError("finetune needs --resume with the pretrained checkpoint")
        loaded = load_checkpoint(resume)
        inputs.append(resume)
        state = TrainState(model=loaded.model, config=cfg)
        calib_paths = calib_dir or data_dir
        calib_planes = load_luminance_dir(calib_paths)
        if calib_dir:
            inputs.append(calib_dir)
        n_stages = state.model.spec.n_stages
        bits_plan = _parse_bits(bits, n_stages)
        state.quant = calibrate(state.model, calib_planes, bits_plan=bits_plan,
                                pin_ab=tuple(pin_ab) if pin_ab else None,
                                share_ab=share_ab)
        if teacher:
            teacher_model = load_checkpoint(teacher).model
            inputs.append(teacher)
        else:
            teacher_model = copy.deepcopy(state.model)
        teacher_quant = calibrate(teacher_model, calib_planes,
                                  bits_plan=(teacher_bits,) * n_stages,
                                  search=False)
    stream = BatchStream(planes, state.model.spec.upscale, crop, state.rng)
    batches = BatchIterator(stream, batch)
    val_pairs = None
    if val_dir:
        from .data import fixed_eval_pairs

        val_planes = [p.data for p in load_luminance_dir(val_dir)]
        val_pairs = fixed_eval_pairs(val_planes, state.model.spec.upscale,
                                     crop, seed=seed, count=8)
        inputs.append(val_dir)
    log_path = f"{out_path}.log"
    with open(log_path, "w") as log_fh:
        def log(rec):
            if rec["iteration"] % log_every == 0 or rec["iteration"] == iters - 1:
                if val_pairs is not None:
                    rec = dict(rec, eval_psnr=_val_psnr(state, val_pairs))
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")

        if stage == "finetune" and teacher_model is not None and distill_w != 0.0:
            records = distill(state, teacher_model, teacher_quant, batches, log)
        else:
            records = train_loop(state, batches, teacher_model, teacher_quant, log)
    save_checkpoint(state, out_path)
    _emit({"command": "train", "stage": stage, "iterations": state.iteration,
           "final_loss": records[-1]["loss"] if records else None,
           "checkpoint": str(out_path), "log": log_path})
    write_manifest("train", {
        "stage": stage, "model": model_name, "scale": scale, "iters": iters,
        "batch": batch, "crop": crop, "lr": lr, "seed": seed,
        "bits": bits, "distill_mode": distill_mode, "distill_w": distill_w,
    }, inputs, [out_path, log_path], started, manifest_path)


@cli.command("build-lut")
@click.option("--ckpt", required=True, type=click.Path())
@click.option("--calib", "calib_dir", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--bits", default=None, help="index bit plan, e.g. 4,3,3")
@click.option("--out-bits", default=None, type=int)
@click.option("--pin-ab", nargs=2, type=float, default=None)
@click.option("--share-ab", is_flag=True)
@click.option("--no-search", is_flag=True, help="keep breakpoints at 0.5")
@click.option("--manifest", "manifest_path", type=click.Path(), default=None)
def build_lut_cmd(ckpt, calib_dir, out_path, bits, out_bits, pin_ab, share_ab,
                  no_search, manifest_path):
    """Calibrate, search breakpoints, tabulate, and write a .iqlut model."""
    started = time.time()
    _configure_threads()
    state = load_checkpoint(ckpt)
    calib_planes = load_luminance_dir(calib_dir)
    spec = state.model.spec
    bits_plan = _parse_bits(bits, spec.n_stages)
    quant = calibrate(state.model, calib_planes, bits_plan=bits_plan,
                      pin_ab=tuple(pin_ab) if pin_ab else None,
                      search=not no_search, share_ab=share_ab)
    lm = convert_model(state.model, quant, out_bits=out_bits)
    save_lut(lm, out_path)
    actual = os.path.getsize(out_path)
    formula = lut_size_bytes(lm.spec)
    _emit({"command": "build-lut", "model_file": str(out_path),
           "size_bytes": actual, "size_formula_bytes": formula,
           "table_region_bytes": table_region_bytes(lm.spec),
           "header_bytes": header_bytes(lm.spec),
           "stages": [{"stage": i, "a": s.a, "b": s.b, "bits": s.bits,
                       "act_lo": s.act.lo, "act_hi": s.act.hi}
                      for i, s in enumerate(lm.stages)]})
    if actual != formula:
        raise IqlutError(f"size formula {formula} != file size {actual}")
    write_manifest("build-lut", {
        "bits": bits, "out_bits": out_bits, "pin_ab": pin_ab,
        "share_ab": share_ab, "search": not no_search,
    }, [ckpt, calib_dir], [out_path], started, manifest_path)


def _sr_image(lm, planes):
    """Super-resolve a loaded image: Y through the tables, chroma bicubic."""
    s = float(lm.spec.upscale)
    if len(planes) == 1:
        return [lut_infer(lm, planes[0])]
    y, cb, cr = rgb_to_ycbcr(*planes)
    y_sr = lut_infer(lm, y)
    cb_sr = ImagePlane(np.clip(resize(cb, s, "bicubic").data, 0.0, 1.0))
    cr_sr = ImagePlane(np.clip(resize(cr, s, "bicubic").data, 0.0, 1.0))
    return list(ycbcr_to_rgb(y_sr, cb_sr, cr_sr))


@cli.command()
@click.option("--model", "model_path", required=True, type=click.Path())
@click.option("--input", "input_path", required=True, type=click.Path())
@click.option("--output", "output_path", required=True, type=click.Path())
@click.option("--float-oracle", "oracle_ckpt", type=click.Path(), default=None,
              help="checkpoint to cross-check the table pipeline against")
@click.option("--manifest", "manifest_path", type=click.Path(), default=None)
def infer(model_path, input_path, output_path, oracle_ckpt, manifest_path):
    """Super-resolve one image with a .iqlut model."""
    started = time.time()
    _configure_threads()
    lm = load_lut(model_path)
    planes = load_image(input_path)
    sr_planes = _sr_image(lm, planes)
    root, ext = os.path.splitext(str(output_path))
    tmp = f"{root}.tmp.{os.getpid()}{ext}"  # keep the extension for the encoder
    save_image(tmp, sr_planes)
    os.replace(tmp, output_path)
    record = {"command": "infer", "output": str(output_path),
              "upscale": lm.spec.upscale}
    inputs = [model_path, input_path]
    if oracle_ckpt:
        state = load_checkpoint(oracle_ckpt)
        inputs.append(oracle_ckpt)
        y = luminance(planes)
        got = lut_infer(lm, y)
        ref = quantized_reference(lm, state.model, y)
        divergence = float(np.abs(got.data - ref.data).max())
        bound = oracle_bound(lm)
        record.update({"oracle_divergence": divergence, "oracle_bound": bound})
        _emit(record)
        if divergence > bound:
            raise DivergenceError(
                f"table pipeline diverged from the float oracle: "
                f"{divergence} > bound {bound}"
            )
    else:
        _emit(record)
    write_manifest("infer", {"float_oracle": bool(oracle_ckpt)}, inputs,
                   [output_path], started, manifest_path)


def _eval_one(hr_planes, scale, shave_px, sr_fn):
    hr_planes = [modcrop(p, scale) for p in hr_planes]
    lr_planes = [degrade(p, scale) for p in hr_planes]
    sr_planes = sr_fn(lr_planes)
    y_hr = luminance(hr_planes)
    y_sr = luminance(sr_planes)
    y_hr = shave(y_hr, shave_px)
    y_sr = shave(y_sr, shave_px)
    return psnr(y_hr, y_sr), ssim(y_hr, y_sr)


@cli.command("eval")
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--model", "model_path", type=click.Path(), default=None)
@click.option("--baseline", type=click.Choice(KERNELS), default=None)
@click.option("--scale", default=4, show_default=True)
@click.option("--shave", "shave_px", type=int, default=None,
              help="border crop before metrics (default: scale)")
@click.option("--manifest", "manifest_path", type=click.Path(), default=None)
def eval_cmd(data_dir, model_path, baseline, scale, shave_px, manifest_path):
    """Y-channel PSNR/SSIM of a model or classical kernel over an HR set."""
    started = time.time()
    _configure_threads()
    if (model_path is None) == (baseline is None):
        raise ConfigError("pass exactly one of --model or --baseline")
    lm = None
    if model_path:
        lm = load_lut(model_path)
        scale = lm.spec.upscale
    shave_px = scale if shave_px is None else shave_px

    def sr_fn(lr_planes):
        if lm is not None:
            return _sr_image(lm, lr_planes)
        return [ImagePlane(np.clip(resize(p, float(scale), baseline).data, 0.0, 1.0))
                for p in lr_planes]

    paths = list_images(data_dir)
    rows = []
    for path in paths:
        p, s = _eval_one(load_image(path), scale, shave_px, sr_fn)
        rows.append((os.path.basename(path), p, s))
        _emit({"image": rows[-1][0], "psnr": p, "ssim": s, "channel": "y"})
    mean_psnr = float(np.mean([r[1] for r in rows]))
    mean_ssim = float(np.mean([r[2] for r in rows]))
    _emit({"summary": True, "method": baseline or os.path.basename(model_path),
           "scale": scale, "shave": shave_px, "images": len(rows),
           "mean_psnr": mean_psnr, "mean_ssim": mean_ssim, "channel": "y"})
    click.echo(f"# {'image':24s} {'psnr':>8s} {'ssim':>8s}")
    for name, p, s in rows:
        click.echo(f"# {name:24s} {p:8.2f} {s:8.4f}")
    click.echo(f"# {'mean':24s} {mean_psnr:8.2f} {mean_ssim:8.4f}")
    write_manifest("eval", {"baseline": baseline, "model": model_path,
                            "scale": scale, "shave": shave_px},
                   [data_dir] + ([model_path] if model_path else []),
                   [], started, manifest_path)


@cli.command("search-ab")
@click.option("--ckpt", required=True, type=click.Path())
@click.option("--calib", "calib_dir", required=True, type=click.Path())
@click.option("--bits", default=None)
@click.option("--share-ab", is_flag=True)
@click.option("--manifest", "manifest_path", type=click.Path(), default=None)
def search_ab_cmd(ckpt, calib_dir, bits, share_ab, manifest_path):
    """Report the greedy breakpoint search without building tables."""
    started = time.time()
    _configure_threads()
    state = load_checkpoint(ckpt)
    calib_planes = load_luminance_dir(calib_dir)
    spec = state.model.spec
    bits_plan = _parse_bits(bits, spec.n_stages)
    quant = calibrate(state.model, calib_planes, bits_plan=bits_plan,
                      share_ab=share_ab)
    for i, sq in enumerate(quant):
        _emit({"stage": i, "a": sq.q.a, "b": sq.q.b, "bits": sq.q.bits,
               "act_lo": sq.act.lo, "act_hi": sq.act.hi})
    write_manifest("search-ab", {"bits": bits, "share_ab": share_ab},
                   [ckpt, calib_dir], [], started, manifest_path)


@cli.command()
@click.option("--model", "model_path", required=True, type=click.Path())
def inspect(model_path):
    """Dump a .iqlut header and its storage breakdown."""
    lm = load_lut(model_path)
    spec = lm.spec
    kh, kw = spec.kernel
    per_code = 1 if spec.out_bits <= 8 else 2
    _emit({"file": str(model_path), "bytes": os.path.getsize(model_path),
           "formula_bytes": lut_size_bytes(spec),
           "layers": spec.layers, "channels": spec.channels,
           "upscale": spec.upscale, "kernel": [kh, kw],
           "out_bits": spec.out_bits, "name": spec.name})
    for i, stage in enumerate(lm.stages):
        c_in, c_out = spec.stage_channels(i)
        levels = 2 ** stage.bits - 1
        _emit({"stage": i, "role": "upsample" if i == spec.layers else "block",
               "bits": stage.bits, "levels": levels, "a": stage.a, "b": stage.b,
               "alpha": stage.alpha, "channels_in": c_in, "channels_out": c_out,
               "entry_width": spec.entry_width(i),
               "code_bytes": c_in * levels * spec.entry_width(i) * per_code})


def main(argv=None):
    try:
        cli(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return 130
    except click.exceptions.ClickException as exc:
        exc.show()
        return 2
    except IqlutError as exc:
        click.echo(f"error: {exc}", err=True)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
