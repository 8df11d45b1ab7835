import numpy as np
import pytest

from conftest import random_tiny_model
from iqlut import accel
from iqlut.errors import IntegrityError
from iqlut.imaging import ImagePlane
from iqlut.lut import (_stage_apply, build_lut, calibrate, convert_model,
                       deserialize, header_bytes, load, lut_infer,
                       lut_size_bytes, oracle_bound, quantized_reference, save,
                       serialize, table_region_bytes)
from iqlut.model import ModelSpec, init_model
from iqlut.network import apply_tables_stage, subnet_batch
from iqlut.quantize import ActRange, NonUniformQuantizer, StageQuant


def make_lut_model(rng, **kwargs):
    model = random_tiny_model(rng, **kwargs)
    planes = [ImagePlane(rng.random((8, 8))) for _ in range(2)]
    quant = calibrate(model, planes, search=False)
    return model, quant, convert_model(model, quant)


def test_build_lut_constant_subnet_is_exact():
    model = init_model(ModelSpec(layers=1, channels=2, upscale=1), seed=0)
    net = model.stages[0].subnets[0]
    for part in (net.w1, net.b1, net.w2, net.b2, net.w3):
        part[...] = 0.0
    net.b3[...] = 0.625
    sq = StageQuant(NonUniformQuantizer(0.5, 0.5, 3), ActRange(0.0, 1.0))
    table = build_lut(net, sq, out_bits=8)
    assert table.levels == 7  # 2^3 - 1
    assert np.array_equal(table.dequantized(), np.full((7, table.entry_width), 0.625))


def test_build_lut_half_step_accuracy():
    rng = np.random.default_rng(1)
    model = random_tiny_model(rng, layers=1, channels=3, upscale=2)
    net = model.stages[0].subnets[0]
    sq = StageQuant(NonUniformQuantizer(0.35, 0.6, 4), ActRange(-0.2, 1.1))
    table = build_lut(net, sq, out_bits=8)
    want = subnet_batch(net, sq.act.denormalize(sq.q.level_preimages()))
    err = np.abs(table.dequantized() - want)
    assert err.max() <= table.out_scale / 2 + 1e-12


def test_size_formula_worked_example():
    # one residual block at 4 bits, k=2x2, 8 output channels, 8-bit codes:
    # 15 levels * 32 entries * 1 byte = 480 code bytes for that block
    spec = ModelSpec(layers=1, channels=8, upscale=1, kernel=(2, 2),
                     block_bits=(4, 3), out_bits=8)
    block_term = 1 * (2 ** 4 - 1) * (2 * 2 * 8) * 1
    assert block_term == 480
    upsample_term = 8 * (2 ** 3 - 1) * (2 * 2 * 1) * 1  # C_out = upscale^2 = 1
    assert table_region_bytes(spec) == block_term + upsample_term
    assert lut_size_bytes(spec) == table_region_bytes(spec) + header_bytes(spec)


def test_size_formula_bits_ratio():
    lo = ModelSpec(layers=1, channels=4, upscale=2, block_bits=(3, 3))
    hi = ModelSpec(layers=1, channels=4, upscale=2, block_bits=(4, 3))
    term = lambda spec, i: ((2 ** spec.block_bits[i] - 1)
                            * spec.stage_channels(i)[0] * spec.entry_width(i))
    assert term(hi, 0) * 7 == term(lo, 0) * 15


def test_size_monotonicity():
    rng = np.random.default_rng(2)
    for _ in range(20):
        layers = int(rng.integers(1, 4))
        base = ModelSpec(layers=layers, channels=int(rng.integers(1, 6)),
                         upscale=int(rng.integers(1, 5)),
                         kernel=(int(rng.integers(1, 4)), int(rng.integers(1, 4))))
        grown_bits = base.with_bits([b + 1 for b in base.block_bits])
        assert lut_size_bytes(grown_bits) > lut_size_bytes(base)
        wider = ModelSpec(layers, base.channels + 1, base.upscale, base.kernel)
        assert lut_size_bytes(wider) > lut_size_bytes(base)
        bigger_k = ModelSpec(layers, base.channels, base.upscale,
                             (base.kernel[0] + 1, base.kernel[1]))
        assert lut_size_bytes(bigger_k) > lut_size_bytes(base)


def test_serialize_round_trip_and_size():
    rng = np.random.default_rng(3)
    for _ in range(10):
        _, _, lm = make_lut_model(rng)
        blob = serialize(lm)
        assert len(blob) == lut_size_bytes(lm.spec)
        again = serialize(deserialize(blob))
        assert again == blob


def test_serialize_corruption_detected():
    rng = np.random.default_rng(4)
    _, _, lm = make_lut_model(rng)
    blob = bytearray(serialize(lm))
    pos = header_bytes(lm.spec) // 2 + 10  # inside the payload
    blob[pos] ^= 0x40
    with pytest.raises(IntegrityError):
        deserialize(bytes(blob))


def test_deserialize_rejects_garbage():
    with pytest.raises(IntegrityError):
        deserialize(b"")
    with pytest.raises(IntegrityError):
        deserialize(b"NOTLUT" + b"\x00" * 64)
    rng = np.random.default_rng(5)
    _, _, lm = make_lut_model(rng)
    blob = bytearray(serialize(lm))
    blob[6] = 9  # version field
    import zlib
    import struct
    body = bytes(blob[:-4])
    blob = body + struct.pack("<I", zlib.crc32(body))
    with pytest.raises(IntegrityError, match="version"):
        deserialize(blob)


def test_save_load_atomic(tmp_path):
    rng = np.random.default_rng(6)
    _, _, lm = make_lut_model(rng)
    path = tmp_path / "m.iqlut"
    save(lm, path)
    lm2 = load(path)
    assert serialize(lm2) == serialize(lm)
    assert not list(tmp_path.glob("*.tmp.*"))


def test_lut_infer_zero_tables_is_bilinear():
    spec = ModelSpec(layers=1, channels=2, upscale=2)
    model = init_model(spec, seed=7)
    for stage in model.stages:
        for net in stage.subnets:
            for part in (net.w1, net.b1, net.w2, net.b2, net.w3, net.b3):
                part[...] = 0.0
    planes = [ImagePlane(np.random.default_rng(0).random((6, 6)))]
    lm = convert_model(model, calibrate(model, planes, search=False))
    lr = ImagePlane(np.random.default_rng(1).random((5, 7)))
    from iqlut.resize import resize
    want = np.clip(resize(lr, 2.0, "bilinear").data, 0.0, 1.0)
    assert np.array_equal(lut_infer(lm, lr).data, want)


def test_lut_matches_quantized_reference_within_bound():
    rng = np.random.default_rng(8)
    for _ in range(5):
        model, quant, lm = make_lut_model(rng)
        lr = ImagePlane(rng.random((7, 6)))
        got = lut_infer(lm, lr)
        ref = quantized_reference(lm, model, lr)
        assert np.abs(got.data - ref.data).max() <= oracle_bound(lm)


@pytest.mark.skipif(not accel.NUMBA_ENABLED, reason="numba path disabled")
def test_stage_kernel_matches_numpy_bitwise():
    rng = np.random.default_rng(9)
    for trial in range(6):
        model, quant, lm = make_lut_model(rng)
        spec = lm.spec
        i = int(rng.integers(spec.n_stages))
        stage = lm.stages[i]
        tabs = [t.dequantized() for t in stage.tables]
        c_in, c_out = spec.stage_channels(i)
        if i == spec.layers:
            c_out = spec.upscale ** 2
        x = rng.standard_normal((c_in, 6, 5))
        sq = stage.stage_quant()
        got = _stage_apply(x, tabs, sq, c_out, *spec.kernel)
        want = apply_tables_stage(x[None], tabs, sq.q, sq.act, c_out,
                                  *spec.kernel)[0]
        assert np.array_equal(got, want)


def test_lut_infer_deterministic():
    rng = np.random.default_rng(10)
    model, quant, lm = make_lut_model(rng)
    lr = ImagePlane(rng.random((6, 6)))
    a = lut_infer(lm, lr)
    b = lut_infer(lm, lr)
    assert np.array_equal(a.data, b.data)


def test_calibrated_search_not_worse_than_pinned():
    # the greedy search minimizes each stage's quantized-vs-float output MSE;
    # its result can never lose to the (0.5, 0.5) start point
    from iqlut.lut import collect_stage_data
    from iqlut.network import stage_tables_float

    rng = np.random.default_rng(11)
    model = random_tiny_model(rng, layers=1, channels=3, upscale=2)
    planes = [ImagePlane(rng.random((10, 10))) for _ in range(2)]
    searched = calibrate(model, planes, bits_plan=(3, 3))
    inputs, outputs = collect_stage_data(model, planes)
    spec = model.spec

    def stage_mse(i, sq):
        tabs = stage_tables_float(model.stages[i], sq.q, sq.act)
        c_out = spec.stage_channels(i)[1]
        errs = [np.mean((apply_tables_stage(arr[None], tabs, sq.q, sq.act,
                                            c_out, *spec.kernel)[0] - ref) ** 2)
                for arr, ref in zip(inputs[i], outputs[i])]
        return float(np.mean(errs))

    for i, sq in enumerate(searched):
        start = StageQuant(NonUniformQuantizer(0.5, 0.5, sq.q.bits), sq.act)
        assert stage_mse(i, sq) <= stage_mse(i, start) + 1e-15
