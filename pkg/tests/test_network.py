import numpy as np
import pytest

from conftest import random_tiny_model
from iqlut.errors import ConfigError, DataError
from iqlut.imaging import ImagePlane
from iqlut.model import ModelSpec, init_model
from iqlut.network import (expanded_conv, forward_full, pixel_shuffle,
                           pixel_unshuffle, residual_blend, sigmoid,
                           subnet_forward, upsample_block)
from iqlut.resize import resize


def subnet_straight_line(net, x):
    """Independent loop evaluation of the three affine+ReLU stages."""
    hidden = net.b1.size
    h1 = [max(0.0, net.w1[i, 0] * x + net.b1[i]) for i in range(hidden)]
    h2 = [max(0.0, sum(net.w2[i, j] * h1[j] for j in range(hidden)) + net.b2[i])
          for i in range(hidden)]
    return np.array([sum(net.w3[i, j] * h2[j] for j in range(hidden)) + net.b3[i]
                     for i in range(net.b3.size)])


def expanded_conv_bruteforce(x, stage, spec, idx):
    """Literal triple-sum over taps and input channels: the output at (h, w)
    gathers tap (i, j) of the patch tensor at spatial position (h+i, w+j)."""
    c_in, height, width = x.shape
    kh, kw = spec.kernel
    _, c_out = spec.stage_channels(idx)
    patch = np.zeros((c_in, c_out, kh, kw, height, width))
    for c in range(c_in):
        for p in range(height):
            for q in range(width):
                vec = subnet_straight_line(stage.subnets[c], x[c, p, q])
                patch[c, :, :, :, p, q] = vec.reshape(c_out, kh, kw)
    out = np.zeros((c_out, height, width))
    for co in range(c_out):
        for h in range(height):
            for w in range(width):
                acc = 0.0
                for i in range(kh):
                    for j in range(kw):
                        for c in range(c_in):
                            if h + i < height and w + j < width:
                                acc += patch[c, co, i, j, h + i, w + j]
                out[co, h, w] = acc
    return out


def test_subnet_zero_weights_annihilate():
    spec = ModelSpec(layers=1, channels=3, upscale=2)
    model = init_model(spec, seed=0)
    net = model.stages[0].subnets[0]
    for part in (net.w1, net.b1, net.w2, net.b2, net.w3, net.b3):
        part[...] = 0.0
    assert np.array_equal(subnet_forward(net, 0.7), np.zeros(net.b3.size))
    net.b3[...] = np.arange(net.b3.size, dtype=np.float64)
    assert np.array_equal(subnet_forward(net, -1.3), net.b3)


def test_subnet_matches_straight_line_oracle():
    rng = np.random.default_rng(10)
    model = random_tiny_model(rng, layers=1, channels=4, upscale=2, kernel=(2, 2))
    net = model.stages[0].subnets[0]
    got = subnet_forward(net, 0.3)
    assert got == pytest.approx(subnet_straight_line(net, 0.3), abs=1e-12)


def test_subnet_rejects_non_finite():
    model = init_model(ModelSpec(layers=1, channels=2, upscale=1), seed=0)
    with pytest.raises(DataError):
        subnet_forward(model.stages[0].subnets[0], float("nan"))


@pytest.mark.parametrize("trial", range(8))
def test_expanded_conv_matches_bruteforce(trial):
    rng = np.random.default_rng(100 + trial)
    model = random_tiny_model(rng)
    spec = model.spec
    idx = int(rng.integers(spec.n_stages))
    c_in, _ = spec.stage_channels(idx)
    h = int(rng.integers(spec.kernel[0], 7))
    w = int(rng.integers(spec.kernel[1], 7))
    x = rng.standard_normal((c_in, h, w))
    got = expanded_conv(x, model.stages[idx], spec, idx)
    want = expanded_conv_bruteforce(x, model.stages[idx], spec, idx)
    ref = np.abs(want).max()
    assert np.abs(got - want).max() <= 1e-6 * max(ref, 1.0)


def test_expanded_conv_degenerate_window():
    rng = np.random.default_rng(42)
    model = random_tiny_model(rng, layers=1, channels=3, upscale=1, kernel=(1, 1))
    x = np.array([[[0.4]]])
    got = expanded_conv(x, model.stages[0], model.spec, 0)
    want = subnet_forward(model.stages[0].subnets[0], 0.4)
    assert got[:, 0, 0] == pytest.approx(want)


def test_expanded_conv_constant_interior():
    # constant input + constant-vector subnet: interior output is the full
    # tap*channel sum of per-tap contributions
    spec = ModelSpec(layers=1, channels=2, upscale=1, kernel=(2, 2))
    model = init_model(spec, seed=1)
    stage = model.stages[0]
    for net in stage.subnets:
        for part in (net.w1, net.b1, net.w2, net.b2, net.w3):
            part[...] = 0.0
        net.b3[...] = 0.25  # every tap of every output channel contributes 0.25
    x = np.full((1, 3, 3), 0.6)
    out = expanded_conv(x, stage, spec, 0)
    kh, kw = spec.kernel
    c_in = 1
    assert out[:, 0, 0] == pytest.approx(kh * kw * c_in * 0.25)
    assert out[:, 2, 2] == pytest.approx(1 * 0.25)  # corner keeps one tap


def test_expanded_conv_zero_linearity():
    spec = ModelSpec(layers=1, channels=2, upscale=1)
    model = init_model(spec, seed=3)
    for net in model.stages[0].subnets:
        net.b1[...] = 0.0
        net.b2[...] = 0.0
        net.b3[...] = 0.0
    out = expanded_conv(np.zeros((1, 4, 4)), model.stages[0], spec, 0)
    assert np.array_equal(out, np.zeros_like(out))


def test_expanded_conv_channel_mismatch():
    model = init_model(ModelSpec(layers=1, channels=2, upscale=1), seed=0)
    with pytest.raises(ConfigError):
        expanded_conv(np.zeros((2, 3, 3)), model.stages[0], model.spec, 0)


def test_residual_blend_cases():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((2, 4, 4))
    fx = rng.standard_normal((2, 4, 4))
    assert residual_blend(x, fx, -20.0) == pytest.approx(x, abs=1e-8)
    assert np.array_equal(residual_blend(x, fx, 0.0), (x + fx) / 2)
    out = residual_blend(np.zeros((1, 1, 1)), np.ones((1, 1, 1)), 1.0)
    assert out[0, 0, 0] == pytest.approx(0.7310585786300049)
    lo = np.minimum(x, fx)
    hi = np.maximum(x, fx)
    blended = residual_blend(x, fx, 0.37)
    assert np.all(blended >= lo - 1e-12) and np.all(blended <= hi + 1e-12)
    with pytest.raises(ConfigError):
        residual_blend(x, fx[:1], 0.0)


def test_pixel_shuffle_defining_order():
    feat = np.arange(4, dtype=np.float64).reshape(1, 4, 1, 1)
    out = pixel_shuffle(feat, 2)
    assert out[0].tolist() == [[0, 1], [2, 3]]


def test_pixel_shuffle_identity_at_one():
    feat = np.random.default_rng(0).random((1, 1, 3, 5))
    assert np.array_equal(pixel_shuffle(feat, 1), feat[:, 0])


def test_pixel_shuffle_index_oracle():
    rng = np.random.default_rng(7)
    feat = rng.random((1, 4, 2, 2))
    out = pixel_shuffle(feat, 2)[0]
    for y in range(4):
        for x in range(4):
            want = feat[0, (y % 2) * 2 + (x % 2), y // 2, x // 2]
            assert out[y, x] == want


def test_pixel_shuffle_is_value_bijection():
    rng = np.random.default_rng(8)
    feat = rng.random((2, 9, 4, 3))
    out = pixel_shuffle(feat, 3)
    assert sorted(out.ravel()) == sorted(feat.ravel())
    assert np.array_equal(pixel_unshuffle(out, 3), feat)


def test_upsample_block_shapes():
    rng = np.random.default_rng(9)
    model = random_tiny_model(rng, layers=1, channels=3, upscale=2, kernel=(2, 2))
    feat = rng.standard_normal((3, 4, 5))
    out = upsample_block(feat, model.stages[-1], model.spec)
    assert out.shape == (8, 10)


def test_forward_full_zero_params_is_bilinear():
    spec = ModelSpec(layers=2, channels=3, upscale=3)
    model = init_model(spec, seed=2)
    for stage in model.stages:
        for net in stage.subnets:
            for part in (net.w1, net.b1, net.w2, net.b2, net.w3, net.b3):
                part[...] = 0.0
    lr = ImagePlane(np.random.default_rng(1).random((6, 7)))
    out = forward_full(lr, model)
    base = np.clip(resize(lr, 3.0, "bilinear").data, 0.0, 1.0)
    assert np.array_equal(out.data, base)


def test_quantized_mode_exact_for_affine_subnets():
    # ReLUs pinned on make every subnet affine; the fused two-level fetch
    # then reproduces the float path exactly at any bit depth
    rng = np.random.default_rng(11)
    model = random_tiny_model(rng, layers=2, channels=3, upscale=2, weight_scale=0.3)
    for stage in model.stages:
        for net in stage.subnets:
            net.w1[...] = np.abs(net.w1)
            net.w2[...] = np.abs(net.w2)
            net.b1[...] = 5.0  # pre-activations stay strictly positive
            net.b2[...] = 5.0
            net.w3[...] *= 0.02  # keep stage outputs small so later stages stay affine
            net.b3[...] = 0.05
    from iqlut.lut import calibrate
    lr = ImagePlane(rng.random((6, 6)))
    quant = calibrate(model, [lr], bits_plan=(3, 3, 3), pin_ab=(0.5, 0.5))
    out_f = forward_full(lr, model, "float")
    out_q = forward_full(lr, model, "quantized", quant)
    assert out_q.data == pytest.approx(out_f.data, abs=1e-9)


def test_sigmoid_stability():
    assert sigmoid(800.0) == 1.0
    assert sigmoid(-800.0) == 0.0
    assert sigmoid(0.0) == 0.5
