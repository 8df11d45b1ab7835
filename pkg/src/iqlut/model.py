"""Model geometry and parameters.

A model is a chain of residual blocks followed by one upsampling stage.
Every stage is an expanded convolution: per input channel, a tiny
scalar-input subnetwork (three affine stages, two ReLUs) emits a
(k_h * k_w * C_out)-vector per pixel which is spatially accumulated.
Residual blocks map C_in -> C channels; the upsampling stage emits
upscale^2 channels that pixel-shuffle into one plane.
"""

import re
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class ModelSpec:
    """Architecture hyperparameters. `block_bits` has layers+1 entries:
    one per residual block plus one for the upsampling stage."""

    layers: int
    channels: int
    upscale: int
    kernel: tuple[int, int] = (2, 2)
    block_bits: tuple[int, ...] = ()
    out_bits: int = 8

    def __post_init__(self):
        if self.layers < 1 or self.channels < 1 or self.upscale < 1:
            raise ConfigError("layers, channels, and upscale must all be >= 1")
        kh, kw = self.kernel
        if kh < 1 or kw < 1:
            raise ConfigError(f"kernel must be >= 1x1, got {self.kernel}")
        if not self.block_bits:
            bits = (4,) + (3,) * self.layers  # first stage wider, rest narrow
            object.__setattr__(self, "block_bits", bits)
        if len(self.block_bits) != self.layers + 1:
            raise ConfigError(
                f"block_bits needs {self.layers + 1} entries (blocks + upsampler), "
                f"got {len(self.block_bits)}"
            )
        if any(b < 2 for b in self.block_bits) or self.out_bits < 2:
            raise ConfigError("bit-depths must be >= 2")
        if self.out_bits > 16:
            raise ConfigError("output codes wider than 16 bits are not supported")

    @property
    def n_stages(self) -> int:
        return self.layers + 1

    def stage_channels(self, stage: int) -> tuple[int, int]:
        """(C_in, C_out) of stage index 0..layers; the last is the upsampler."""
        if stage < 0 or stage > self.layers:
            raise ConfigError(f"stage {stage} out of range for {self.layers} layers")
        if stage == self.layers:
            return self.channels, self.upscale * self.upscale
        return (1 if stage == 0 else self.channels), self.channels

    def entry_width(self, stage: int) -> int:
        kh, kw = self.kernel
        return kh * kw * self.stage_channels(stage)[1]

    @property
    def name(self) -> str:
        return f"IQ-L{self.layers}C{self.channels}"

    def with_bits(self, block_bits, out_bits=None) -> "ModelSpec":
        return replace(self, block_bits=tuple(block_bits),
                       out_bits=self.out_bits if out_bits is None else out_bits)


_NAME_RE = re.compile(r"^IQ-L(\d+)C(\d+)$", re.IGNORECASE)


def spec_from_name(name: str, upscale: int, **kwargs) -> ModelSpec:
    """Parse the compact IQ-L<layers>C<channels> naming."""
    m = _NAME_RE.match(name.strip())
    if not m:
        raise ConfigError(f"cannot parse model name {name!r} (expected IQ-L<n>C<m>)")
    return ModelSpec(layers=int(m.group(1)), channels=int(m.group(2)),
                     upscale=upscale, **kwargs)


@dataclass
class SubnetParams:
    """One scalar-input subnetwork: affine -> ReLU -> affine -> ReLU -> affine."""

    w1: np.ndarray  # (hidden, 1)
    b1: np.ndarray  # (hidden,)
    w2: np.ndarray  # (hidden, hidden)
    b2: np.ndarray  # (hidden,)
    w3: np.ndarray  # (entry_width, hidden)
    b3: np.ndarray  # (entry_width,)

    def validate(self, hidden: int, entry_width: int) -> None:
        shapes = {
            "w1": (hidden, 1), "b1": (hidden,),
            "w2": (hidden, hidden), "b2": (hidden,),
            "w3": (entry_width, hidden), "b3": (entry_width,),
        }
        for name, want in shapes.items():
            arr = getattr(self, name)
            if arr.shape != want:
                raise ConfigError(f"subnet {name} has shape {arr.shape}, expected {want}")
            if not np.all(np.isfinite(arr)):
                raise ConfigError(f"subnet {name} contains non-finite values")


@dataclass
class StageParams:
    """All subnetworks of one stage (one per input channel) plus the
    residual gate logit (a 0-d array so the optimizer can update it in
    place). The upsampling stage carries no gate."""

    subnets: list[SubnetParams]
    alpha: np.ndarray | None = None


@dataclass
class Model:
    spec: ModelSpec
    stages: list[StageParams] = field(default_factory=list)

    def validate(self) -> None:
        if len(self.stages) != self.spec.n_stages:
            raise ConfigError(
                f"model has {len(self.stages)} stages, spec wants {self.spec.n_stages}"
            )
        for i, stage in enumerate(self.stages):
            c_in, _ = self.spec.stage_channels(i)
            if len(stage.subnets) != c_in:
                raise ConfigError(f"stage {i} has {len(stage.subnets)} subnets, expected {c_in}")
            for net in stage.subnets:
                net.validate(self.spec.channels, self.spec.entry_width(i))


def init_model(spec: ModelSpec, seed: int = 0) -> Model:
    """He-style init; the output stage is damped so the untrained residual
    branch stays small next to the interpolation baseline."""
    rng = np.random.default_rng(seed)
    hidden = spec.channels
    stages = []
    for i in range(spec.n_stages):
        c_in, _ = spec.stage_channels(i)
        width = spec.entry_width(i)
        nets = []
        for _ in range(c_in):
            nets.append(SubnetParams(
                w1=rng.normal(0.0, np.sqrt(2.0), size=(hidden, 1)),
                b1=np.zeros(hidden),
                w2=rng.normal(0.0, np.sqrt(2.0 / hidden), size=(hidden, hidden)),
                b2=np.zeros(hidden),
                w3=rng.normal(0.0, 0.1 * np.sqrt(2.0 / hidden), size=(width, hidden)),
                b3=np.zeros(width),
            ))
        alpha = None if i == spec.layers else np.zeros(())
        stages.append(StageParams(subnets=nets, alpha=alpha))
    model = Model(spec=spec, stages=stages)
    model.validate()
    return model


def named_params(model: Model):
    """Stable (name, array) iteration over every trainable tensor, residual
    gate logits included. Arrays are the live model buffers."""
    for i, stage in enumerate(model.stages):
        for c, net in enumerate(stage.subnets):
            for part in ("w1", "b1", "w2", "b2", "w3", "b3"):
                yield f"s{i}.c{c}.{part}", getattr(net, part)
        if stage.alpha is not None:
            yield f"s{i}.alpha", stage.alpha


def zero_grads(model: Model) -> dict:
    return {name: np.zeros_like(arr) for name, arr in named_params(model)}
