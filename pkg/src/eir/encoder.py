"""Embedding networks mapping a sample to a unit-norm feature vector."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError
from .tensor import Tensor, no_grad


@dataclass(frozen=True)
class EncoderSpec:
    """Architecture description.

    For ``mlp`` every entry of ``layer_widths`` is a dense layer. For
    ``small_cnn`` the first two entries are the channel counts of two
    conv(3x3)-relu-maxpool blocks and the rest are dense layers. The last
    width is always the embedding dimension.
    """

    architecture: str = "mlp"
    layer_widths: tuple[int, ...] = (128,)
    embed_dim: int = 128
    input_shape: tuple[int, ...] = (64,)

    def __post_init__(self):
        object.__setattr__(self, "layer_widths", tuple(int(w) for w in self.layer_widths))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        self.validate()

    def validate(self) -> None:
        if self.architecture not in ("mlp", "small_cnn"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.embed_dim <= 0:
            raise ConfigError("embed_dim must be positive")
        if not self.layer_widths or any(w <= 0 for w in self.layer_widths):
            raise ConfigError(f"layer widths must be positive, got {self.layer_widths}")
        if self.layer_widths[-1] != self.embed_dim:
            raise ConfigError(
                f"final layer width {self.layer_widths[-1]} must equal embed_dim {self.embed_dim}"
            )
        if self.architecture == "small_cnn":
            if len(self.input_shape) != 3:
                raise ConfigError("small_cnn needs a (channels, height, width) input shape")
            if len(self.layer_widths) < 3:
                raise ConfigError("small_cnn needs two conv widths and at least one dense width")
            _, h, w = self.input_shape
            if h % 4 or w % 4:
                raise ConfigError("small_cnn input height and width must be divisible by 4")
        elif len(self.input_shape) == 0:
            raise ConfigError("input_shape must be non-empty")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderSpec":
        return cls(**d)


@dataclass
class EncoderParams:
    """Trainable tensors plus constant input-standardisation buffers.

    ``input_mean`` and ``input_std`` hold one value per input channel (a
    single value for flat vectors) and are applied before the first layer.
    """

    spec: EncoderSpec
    tensors: dict[str, Tensor] = field(default_factory=dict)
    input_mean: np.ndarray = field(default_factory=lambda: np.zeros(1))
    input_std: np.ndarray = field(default_factory=lambda: np.ones(1))

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.tensors.items())

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def count(self) -> int:
        return int(sum(t.size for t in self.tensors.values()))

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            self.spec,
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()},
            self.input_mean.copy(),
            self.input_std.copy(),
        )

    def set_input_stats(self, mean, std) -> None:
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        std = np.atleast_1d(np.asarray(std, dtype=np.float64))
        channels = self.spec.input_shape[0] if self.spec.architecture == "small_cnn" else 1
        if mean.shape not in ((1,), (channels,)) or std.shape != mean.shape:
            raise DimensionError(f"input stats of shape {mean.shape} do not fit {channels} channel(s)")
        if np.any(std <= 0) or not np.all(np.isfinite(mean)):
            raise ConfigError("input std must be positive and stats finite")
        self.input_mean, self.input_std = mean, std


def _layer_shapes(spec: EncoderSpec) -> list[tuple[str, tuple[int, ...], int]]:
    """(name, weight shape, fan_in) in forward order."""
    shapes = []
    if spec.architecture == "mlp":
        fan = int(np.prod(spec.input_shape))
        for i, w in enumerate(spec.layer_widths):
            shapes.append((f"fc{i}", (fan, w), fan))
            fan = w
        return shapes
    c, h, w = spec.input_shape
    for i, ch in enumerate(spec.layer_widths[:2]):
        shapes.append((f"conv{i}", (ch, c, 3, 3), c * 9))
        c = ch
    fan = c * (h // 4) * (w // 4)
    for i, width in enumerate(spec.layer_widths[2:]):
        shapes.append((f"fc{i}", (fan, width), fan))
        fan = width
    return shapes


def init(spec: EncoderSpec, seed: int) -> EncoderParams:
    """He-scaled uniform weights (std sqrt(2/fan_in)) and zero biases."""
    spec.validate()
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape, fan_in in _layer_shapes(spec):
        bound = np.sqrt(6.0 / fan_in)
        tensors[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=f"{name}.weight")
        tensors[f"{name}.bias"] = Tensor(np.zeros(shape[0] if name.startswith("conv") else shape[1]), requires_grad=True, name=f"{name}.bias")
    return EncoderParams(spec, tensors)


def _as_batch(params: EncoderParams, batch) -> Tensor:
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    if tuple(x.shape[1:]) != params.spec.input_shape:
        raise DimensionError(f"batch sample shape {x.shape[1:]} != encoder input {params.spec.input_shape}")
    mean, std = params.input_mean, params.input_std
    if np.all(mean == 0) and np.all(std == 1):
        return x
    if x.requires_grad:
        raise DimensionError("input standardisation does not propagate gradients into the batch")
    view = (1, -1) + (1,) * (x.ndim - 2) if mean.size > 1 else (1,) * x.ndim
    return Tensor((x.data - mean.reshape(view)) / std.reshape(view))


def _trunk(params: EncoderParams, x: Tensor) -> Tensor:
    """Everything up to, and excluding, the final dense layer."""
    spec = params.spec
    if spec.architecture == "small_cnn":
        for i in range(2):
            x = T.conv2d(x, params[f"conv{i}.weight"], padding=1)
            x = T.max_pool2d(T.relu(T.add_bias(x, params[f"conv{i}.bias"], axis=1)))
        n_fc = len(spec.layer_widths) - 2
    else:
        n_fc = len(spec.layer_widths)
    x = T.reshape(x, (x.shape[0], -1))
    for i in range(n_fc - 1):
        x = T.relu(T.add_bias(x @ params[f"fc{i}.weight"], params[f"fc{i}.bias"]))
    return x


def forward(params: EncoderParams, batch) -> Tensor:
    """Embed a batch; rows of the result have unit l2 norm."""
    x = _trunk(params, _as_batch(params, batch))
    last = sum(1 for k in params.tensors if k.startswith("fc") and k.endswith(".weight")) - 1
    z = T.add_bias(x @ params[f"fc{last}.weight"], params[f"fc{last}.bias"])
    return T.l2_normalize(z, axis=1)


def penultimate(params: EncoderParams, batch) -> Tensor:
    """Activation feeding the final projection (linear-probe features)."""
    return _trunk(params, _as_batch(params, batch))


def embed(params: EncoderParams, samples: np.ndarray, chunk: int = 512, layer: Optional[str] = None) -> np.ndarray:
    """Gradient-free feature extraction in chunks."""
    fn = penultimate if layer == "penultimate" else forward
    outs = []
    with no_grad():
        for s in range(0, len(samples), chunk):
            outs.append(fn(params, samples[s : s + chunk]).data)
    return np.concatenate(outs, axis=0)
