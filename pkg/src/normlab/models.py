"""Deep fully-connected nets and WideResNet-style conv stacks with pluggable normalizers."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import tensor as T
from .errors import ConfigError, UsageError
from .normalizers import (
    DEFAULT_EPS,
    DEFAULT_MOMENTUM,
    Mode,
    NormKind,
    Normalizer,
    reg_norm_penalty,
)
from .tensor import Tensor

STEM_CHANNELS = 16


@dataclass
class ModelConfig:
    kind: str = "mlp"
    depth: int = 4
    width: int = 64
    skip: bool = False
    activation: str = "relu"
    norm: str = "none"
    num_classes: int = 10
    input_shape: tuple = (28, 28, 1)
    init: str = "fan_in"
    seed: int = 0
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM

    def __post_init__(self):
        self.input_shape = tuple(int(n) for n in self.input_shape)
        self.norm = NormKind.parse(self.norm).value
        self.validate()

    def validate(self):
        if self.kind not in ("mlp", "wideresnet"):
            raise ConfigError(f"model kind must be 'mlp' or 'wideresnet', got {self.kind!r}")
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2, got {self.depth}")
        if self.width < 1:
            raise ConfigError(f"width must be >= 1, got {self.width}")
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.activation not in ("relu", "tanh"):
            raise ConfigError(f"activation must be 'relu' or 'tanh', got {self.activation!r}")
        if self.init != "fan_in":
            raise ConfigError(f"unknown init scheme {self.init!r}")
        if self.kind == "wideresnet":
            if (self.depth - 2) % 6 or self.depth < 8:
                raise ConfigError(f"wideresnet depth must be 6n+2 with n >= 1, got {self.depth}")
            if len(self.input_shape) != 3:
                raise ConfigError(f"wideresnet needs (H, W, C) inputs, got {self.input_shape}")
        if self.skip and self.kind == "mlp":
            raise ConfigError("skip connections are only defined for wideresnet")

    @property
    def blocks_per_stage(self) -> int:
        return (self.depth - 2) // 6

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown model keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class Layer:
    """One weight layer: op (dense or conv), then normalizer, then activation."""

    name: str
    op: str  # "dense" | "conv"
    weight: Tensor
    bias: Tensor
    norm: Normalizer | None
    stride: int = 1
    activate: bool = True

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias] + ([] if self.norm is None else self.norm.parameters())

    def linear(self, x: Tensor) -> Tensor:
        norm = self.norm
        w = self.weight if norm is None else norm.prepare_weight(self.weight)
        if norm is not None:
            x = norm.prepare_input(x)
        if self.op == "dense":
            return T.matmul(x, w) + self.bias
        return T.conv2d(x, w, self.stride, "same") + self.bias


@dataclass
class LayerCapture:
    """Activations recorded at one layer during a captured forward pass."""

    preact: Tensor  # gamma * zhat + beta, the input of the nonlinearity (logits for the last layer)
    post: Tensor
    zbar: Tensor | None = None


@dataclass
class ForwardOutput:
    logits: Tensor
    captures: list[LayerCapture] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)


class Model:
    """Built network: ordered layers plus optional 1x1 projection shortcuts."""

    def __init__(self, config: ModelConfig, layers: list[Layer], shortcuts: dict[int, Layer]):
        self.config = config
        self.layers = layers
        self.shortcuts = shortcuts
        self.last_forward: ForwardOutput | None = None

    # parameters

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for layer in self.layers:
            out += [(p.name, p) for p in layer.parameters()]
        for idx in sorted(self.shortcuts):
            out += [(p.name, p) for p in self.shortcuts[idx].parameters()]
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.parameters()])

    def set_flat(self, flat: np.ndarray) -> None:
        offset = 0
        for p in self.parameters():
            p.data[...] = flat[offset : offset + p.size].reshape(p.shape)
            offset += p.size

    def normalizers(self) -> list[Normalizer]:
        return [layer.norm for layer in self.layers if layer.norm is not None]

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in self.named_parameters():
            h.update(name.encode())
            h.update(p.data.tobytes())
        for norm in self.normalizers():
            if norm.stats is not None:
                h.update(norm.stats.mean.tobytes())
                h.update(norm.stats.var.tobytes())
                h.update(str(norm.stats.count).encode())
        return h.hexdigest()

    # forward

    def _act(self, x: Tensor) -> Tensor:
        return T.relu(x) if self.config.activation == "relu" else T.tanh(x)

    def _finish(self, layer: Layer, z: Tensor, mode: Mode, captures: list) -> Tensor:
        if layer.norm is None:
            preact, zbar = z, None
        else:
            preact, zbar = layer.norm.normalize(z, mode)
        post = self._act(preact) if layer.activate else preact
        captures.append(LayerCapture(preact, post, zbar))
        return post

    def _unit(self, layer: Layer, x: Tensor, mode: Mode, captures: list) -> Tensor:
        return self._finish(layer, layer.linear(x), mode, captures)

    def forward(self, x, mode: Mode | str = Mode.TRAIN, capture: bool = False) -> ForwardOutput:
        """Run the network on a batch ``x`` of shape (N, *input_shape)."""
        mode = Mode(mode)
        x = T.as_tensor(x)
        if tuple(x.shape[1:]) != self.config.input_shape:
            raise ConfigError(f"input shape {x.shape[1:]} does not match model input {self.config.input_shape}")
        notes = []
        if mode is Mode.EVAL and any(n.stats is not None and n.stats.count == 0 for n in self.normalizers()):
            notes.append("eval mode with never-updated running statistics")
        captures: list[LayerCapture] = []
        if self.config.kind == "mlp":
            h = x.reshape(x.shape[0], -1)
            for layer in self.layers:
                h = self._unit(layer, h, mode, captures)
        else:
            h = self._wrn_forward(x, mode, captures)
        out = ForwardOutput(h, captures if capture else [], notes)
        self.last_forward = ForwardOutput(h, captures, notes)
        return out

    def _wrn_forward(self, x: Tensor, mode: Mode, captures: list) -> Tensor:
        # Pre-activation ordering: the residual stream ``s`` is carried before
        # normalization; each conv's normalizer acts on the summed stream.
        layers = self.layers
        s = layers[0].linear(x)
        a = self._finish(layers[0], s, mode, captures)
        for i in range(1, len(layers) - 1, 2):
            b = self._unit(layers[i], a, mode, captures)
            z = layers[i + 1].linear(b)
            if self.config.skip:
                proj = self.shortcuts.get(i)
                z = z + (s if proj is None else proj.linear(s))
            s = z
            a = self._finish(layers[i + 1], s, mode, captures)
        pooled = a.mean(axis=(1, 2))
        return self._unit(layers[-1], pooled, mode, captures)

    def regularizer_total(self, output: ForwardOutput | None = None) -> Tensor:
        """Sum of RegNorm penalties over every normalized layer of a forward pass."""
        if not NormKind(self.config.norm).is_regnorm:
            raise UsageError(f"regularizer_total needs a regnorm model, not {self.config.norm!r}")
        output = output if output is not None else self.last_forward
        if output is None:
            raise UsageError("regularizer_total called before any forward pass")
        total = T.Tensor(0.0)
        for c in output.captures:
            if c.zbar is not None:
                total = total + reg_norm_penalty(c.zbar)
        return total


def _init_std(fan_in: int, activation: str) -> float:
    return float(np.sqrt((2.0 if activation == "relu" else 1.0) / fan_in))


def build(config: ModelConfig, rng: np.random.Generator | None = None) -> Model:
    """Instantiate a model with fan-in Gaussian weights, zero biases and identity affine/statistics."""
    rng = rng if rng is not None else T.make_rng(config.seed)
    act = config.activation

    def make_layer(name, op, shape, out_ch, stride=1, normed=True, activate=True):
        fan_in = int(np.prod(shape[:-1]))
        w = T.parameter(rng.standard_normal(shape) * _init_std(fan_in, act), name=f"{name}.w")
        b = T.parameter(np.zeros(out_ch), name=f"{name}.b")
        norm = None
        if normed:
            norm = Normalizer(config.norm, out_ch, config.eps, config.momentum, prefix=f"{name}.")
        return Layer(name, op, w, b, norm, stride, activate)

    layers: list[Layer] = []
    shortcuts: dict[int, Layer] = {}
    k = config.num_classes
    if config.kind == "mlp":
        d_in = int(np.prod(config.input_shape))
        for l in range(config.depth - 1):
            layers.append(make_layer(f"l{l + 1}", "dense", (d_in, config.width), config.width))
            d_in = config.width
        layers.append(make_layer(f"l{config.depth}", "dense", (d_in, k), k, normed=False, activate=False))
        return Model(config, layers, shortcuts)

    c_in = config.input_shape[-1]
    layers.append(make_layer("l1", "conv", (3, 3, c_in, STEM_CHANNELS), STEM_CHANNELS))
    c_in = STEM_CHANNELS
    idx = 2
    for stage, base in enumerate((16, 32, 64)):
        c_out = base * config.width
        for block in range(config.blocks_per_stage):
            stride = 2 if stage > 0 and block == 0 else 1
            first = len(layers)
            layers.append(make_layer(f"l{idx}", "conv", (3, 3, c_in, c_out), c_out, stride))
            layers.append(make_layer(f"l{idx + 1}", "conv", (3, 3, c_out, c_out), c_out))
            if config.skip and (stride != 1 or c_in != c_out):
                shortcuts[first] = make_layer(f"l{idx}.proj", "conv", (1, 1, c_in, c_out), c_out, stride, normed=False)
            c_in = c_out
            idx += 2
    layers.append(make_layer(f"l{idx}", "dense", (c_in, k), k, normed=False, activate=False))
    return Model(config, layers, shortcuts)
