"""Normalization layers: Batch, Layer, Weight, BMLV, LMBV, PreLayerNorm, RegNorm.

Axis conventions: features are (N, H, W, C) for conv layers and (N, D) for
dense layers.  "Batch axes" are every axis except the channel axis (N, H, W);
"layer axes" are every axis except the batch axis (H, W, C).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .errors import DataError, NumericError, ParameterError, UsageError
from .tensor import Tensor

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.9


class NormKind(str, enum.Enum):
    NONE = "none"
    BATCH = "batch"
    BATCH_TRAIN = "batch_train"
    LAYER = "layer"
    WEIGHT = "weight"
    BMLV = "bmlv"
    LMBV = "lmbv"
    PRELAYERNORM = "prelayernorm"
    REGNORM = "regnorm"
    PREREGNORM = "preregnorm"

    @classmethod
    def parse(cls, name) -> "NormKind":
        if isinstance(name, cls):
            return name
        try:
            return cls(name)
        except ValueError:
            valid = ", ".join(k.value for k in cls)
            raise ParameterError(f"unknown normalizer {name!r}; valid options: {valid}") from None

    @property
    def centers_input(self) -> bool:
        return self in (NormKind.PRELAYERNORM, NormKind.PREREGNORM)

    @property
    def is_regnorm(self) -> bool:
        return self in (NormKind.REGNORM, NormKind.PREREGNORM)

    @property
    def has_affine(self) -> bool:
        return self not in (NormKind.NONE, NormKind.WEIGHT)

    @property
    def uses_batch(self) -> bool:
        return self in (NormKind.BATCH, NormKind.BATCH_TRAIN, NormKind.BMLV, NormKind.LMBV)


class Mode(str, enum.Enum):
    """Forward-pass regime.

    TRAIN uses batch statistics and updates running statistics; EVAL uses
    running statistics; BATCH_TRAIN uses batch statistics without updating.
    """

    TRAIN = "train"
    EVAL = "eval"
    BATCH_TRAIN = "batch_train"


def batch_axes(ndim: int) -> tuple[int, ...]:
    return tuple(range(ndim - 1))


def layer_axes(ndim: int) -> tuple[int, ...]:
    return tuple(range(1, ndim))


@dataclass
class NormAffine:
    gamma: Tensor
    beta: Tensor

    @classmethod
    def identity(cls, channels: int, prefix: str = "") -> "NormAffine":
        return cls(
            T.parameter(np.ones(channels), name=f"{prefix}gamma"),
            T.parameter(np.zeros(channels), name=f"{prefix}beta"),
        )

    def __call__(self, z: Tensor) -> Tensor:
        return z * self.gamma + self.beta


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray
    momentum: float = DEFAULT_MOMENTUM
    count: int = 0

    @classmethod
    def identity(cls, channels: int, momentum: float = DEFAULT_MOMENTUM) -> "RunningStats":
        if not 0.0 < momentum < 1.0:
            raise ParameterError(f"momentum must lie in (0, 1), got {momentum}")
        return cls(np.zeros(channels), np.ones(channels), momentum)

    def update(self, batch_mean: np.ndarray, batch_var: np.ndarray) -> None:
        m = self.momentum
        self.mean = m * self.mean + (1.0 - m) * batch_mean
        self.var = m * self.var + (1.0 - m) * batch_var
        self.count += 1


def _check_axes(z: Tensor, axes) -> None:
    for a in axes:
        if not 0 <= a < z.ndim:
            raise DataError(f"axis {a} out of range for shape {z.shape}")
        if z.shape[a] == 0:
            raise DataError(f"empty reduction over axis {a} of shape {z.shape}")


def moment_normalize(z: Tensor, mean_axes, std_axes, eps: float = DEFAULT_EPS) -> Tensor:
    """(z - mean) / sqrt(var + eps) with independently chosen reduction axes.

    The mean is taken over ``mean_axes``; the biased variance over
    ``std_axes`` is computed on the already-centred input.
    """
    mean_axes, std_axes = tuple(mean_axes), tuple(std_axes)
    _check_axes(z, mean_axes + std_axes)
    centred = z - z.mean(axis=mean_axes, keepdims=True)
    dev = centred - centred.mean(axis=std_axes, keepdims=True)
    var = T.square(dev).mean(axis=std_axes, keepdims=True)
    return centred / T.sqrt(var + eps)


def batch_norm(
    z: Tensor,
    mode: Mode | str,
    stats: RunningStats,
    affine: NormAffine | None = None,
    eps: float = DEFAULT_EPS,
) -> Tensor:
    mode = Mode(mode)
    axes = batch_axes(z.ndim)
    if mode is Mode.EVAL:
        shape = (1,) * (z.ndim - 1) + (-1,)
        out = (z - stats.mean.reshape(shape)) / np.sqrt(stats.var.reshape(shape) + eps)
    else:
        if mode is Mode.TRAIN and z.shape[0] < 2:
            raise DataError("batch norm in train mode needs a batch of at least 2")
        out = moment_normalize(z, axes, axes, eps)
        if mode is Mode.TRAIN:
            stats.update(z.data.mean(axis=axes), z.data.var(axis=axes))
    return affine(out) if affine is not None else out


def layer_norm(z: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    axes = layer_axes(z.ndim)
    return moment_normalize(z, axes, axes, eps)


def bmlv(z: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Batch mean, layer variance."""
    return moment_normalize(z, batch_axes(z.ndim), layer_axes(z.ndim), eps)


def lmbv(z: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Layer mean, batch variance."""
    return moment_normalize(z, layer_axes(z.ndim), batch_axes(z.ndim), eps)


def weight_norm(w: Tensor) -> Tensor:
    """Divide a whole weight tensor by its Frobenius norm."""
    norm = T.sqrt(T.square(w).sum())
    if not norm.item() > 0:
        raise NumericError("weight_norm of an all-zero weight tensor")
    return w / norm


def center_layer(x: Tensor) -> Tensor:
    """Subtract each sample's mean over its feature axes."""
    return x - x.mean(axis=layer_axes(x.ndim), keepdims=True)


def layer_std_divide(z: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Divide each sample by its (centred) standard deviation without centring it."""
    axes = layer_axes(z.ndim)
    dev = z - z.mean(axis=axes, keepdims=True)
    return z / T.sqrt(T.square(dev).mean(axis=axes, keepdims=True) + eps)


def pre_layer_norm(
    x_prev: Tensor,
    layer: Callable[[Tensor], Tensor],
    affine: NormAffine | None = None,
    eps: float = DEFAULT_EPS,
) -> Tensor:
    """Centre the layer input per sample, apply ``layer``, then divide by the per-sample std."""
    if x_prev.size == 0:
        raise DataError("pre_layer_norm on an empty input")
    out = layer_std_divide(layer(center_layer(x_prev)), eps)
    return affine(out) if affine is not None else out


def reg_norm(z: Tensor, eps: float = DEFAULT_EPS) -> Tensor:
    """Divide each sample by its uncentred RMS over the feature axes."""
    ms = T.square(z).mean(axis=layer_axes(z.ndim), keepdims=True)
    if eps <= 0 and np.any(ms.data == 0):
        raise NumericError("reg_norm: a sample has zero second moment and eps=0")
    return z / T.sqrt(ms + eps)


def reg_norm_penalty(zbar: Tensor) -> Tensor:
    """E_{a,b}[sum_i (zbar_a_i + zbar_b_i)^2 - 2] over all ordered pairs, a=b included.

    Expanding the square over the B^2 pairs gives
    ``2 * mean_a(sum_i zbar_a_i^2) + 2 * sum_i m_i^2 - 2 * N_l`` with ``m`` the
    per-feature batch mean; this is evaluated directly so the cost is linear
    in the batch.  For RMS-normalized rows it reduces to ``2 * sum_i m_i^2``.
    """
    if zbar.shape[0] == 0:
        raise DataError("reg_norm_penalty on an empty batch")
    flat = zbar.reshape(zbar.shape[0], -1)
    n_features = flat.shape[1]
    sq = T.square(flat).sum(axis=1).mean()
    m = flat.mean(axis=0)
    return 2.0 * sq + 2.0 * T.square(m).sum() - 2.0 * n_features


def reg_norm_penalty_pairwise(zbar: np.ndarray) -> float:
    """Brute-force enumeration of every ordered pair; O(B^2 N_l)."""
    flat = np.asarray(zbar, dtype=np.float64).reshape(len(zbar), -1)
    if len(flat) == 0:
        raise DataError("reg_norm_penalty on an empty batch")
    total = 0.0
    for a in flat:
        for b in flat:
            total += np.sum((a + b) ** 2 - 2.0)
    return total / len(flat) ** 2


@dataclass
class Normalizer:
    """Per-layer normalization state and the three hooks a layer calls.

    A layer computes ``z = op(prepare_input(x), prepare_weight(W)) + b`` and
    then ``normalize(z, mode)``, which returns the pre-activation fed to the
    nonlinearity together with the statistic RegNorm penalizes.
    """

    kind: NormKind
    channels: int
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM
    prefix: str = ""
    affine: NormAffine | None = field(init=False, default=None)
    stats: RunningStats | None = field(init=False, default=None)

    def __post_init__(self):
        self.kind = NormKind.parse(self.kind)
        if not self.eps > 0:
            raise ParameterError(f"eps must be > 0, got {self.eps}")
        if self.kind.has_affine:
            self.affine = NormAffine.identity(self.channels, self.prefix)
        if self.kind in (NormKind.BATCH, NormKind.BATCH_TRAIN):
            self.stats = RunningStats.identity(self.channels, self.momentum)

    def parameters(self) -> list[Tensor]:
        return [] if self.affine is None else [self.affine.gamma, self.affine.beta]

    def prepare_input(self, x: Tensor) -> Tensor:
        return center_layer(x) if self.kind.centers_input else x

    def prepare_weight(self, w: Tensor) -> Tensor:
        return weight_norm(w) if self.kind is NormKind.WEIGHT else w

    def normalize(self, z: Tensor, mode: Mode | str) -> tuple[Tensor, Tensor | None]:
        mode = Mode(mode)
        kind, eps = self.kind, self.eps
        zbar = None
        if kind in (NormKind.NONE, NormKind.WEIGHT):
            return z, None
        if kind is NormKind.BATCH:
            out = batch_norm(z, mode, self.stats, eps=eps)
        elif kind is NormKind.BATCH_TRAIN:
            # Running stats are still accumulated but never read.
            out = batch_norm(z, Mode.TRAIN if mode is Mode.TRAIN else Mode.BATCH_TRAIN, self.stats, eps=eps)
        elif kind is NormKind.LAYER:
            out = layer_norm(z, eps)
        elif kind is NormKind.BMLV:
            out = bmlv(z, eps)
        elif kind is NormKind.LMBV:
            out = lmbv(z, eps)
        elif kind is NormKind.PRELAYERNORM:
            out = layer_std_divide(z, eps)
        elif kind.is_regnorm:
            out = zbar = reg_norm(z, eps)
        else:  # pragma: no cover
            raise UsageError(f"unhandled normalizer {kind}")
        return self.affine(out), zbar
