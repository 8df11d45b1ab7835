import numpy as np
import pytest

from iqlut.data import write_synthetic_dataset
from iqlut.imaging import ImagePlane
from iqlut.model import ModelSpec, init_model


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    """Small synthetic HR dataset shared by data/CLI tests."""
    root = tmp_path_factory.mktemp("synth")
    write_synthetic_dataset(root, count=6, size=64, seed=414)
    return root


@pytest.fixture(scope="session")
def calib_planes():
    rng = np.random.default_rng(77)
    return [ImagePlane(rng.random((14, 11))) for _ in range(4)]


def random_tiny_model(rng, layers=None, channels=None, upscale=None, kernel=None,
                      weight_scale=0.5):
    layers = layers or int(rng.integers(1, 3))
    channels = channels or int(rng.integers(2, 5))
    upscale = upscale or int(rng.integers(1, 4))
    kernel = kernel or (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    spec = ModelSpec(layers=layers, channels=channels, upscale=upscale, kernel=kernel)
    model = init_model(spec, seed=int(rng.integers(1 << 31)))
    for stage in model.stages:
        for net in stage.subnets:
            for part in (net.w1, net.b1, net.w2, net.b2, net.w3, net.b3):
                part[...] = weight_scale * rng.standard_normal(part.shape)
        if stage.alpha is not None:
            stage.alpha[...] = rng.normal(0.0, 0.5)
    return model
