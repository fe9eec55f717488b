"""Plain-SGD training, learning-rate grid search and the batch-size sweep."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Callable

import numpy as np

from . import tensor as T
from .data import DatasetHandle
from .errors import ConfigError, Divergence, ParameterError
from .models import Model, ModelConfig, build
from .normalizers import Mode, NormKind

log = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e6
DEFAULT_LR_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0)


@dataclass
class TrainConfig:
    model: ModelConfig
    lr: float = 0.1
    reg_lambda: float = 1e-2
    batch_size: int = 64
    eval_batch_size: int = 256
    steps: int = 1000
    diag_period: int = 0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.steps < 1:
            raise ConfigError(f"steps must be >= 1, got {self.steps}")
        if self.reg_lambda < 0:
            raise ConfigError(f"reg_lambda must be >= 0, got {self.reg_lambda}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")

    @property
    def effective_reg_lambda(self) -> float:
        return self.reg_lambda if NormKind(self.model.norm).is_regnorm else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = sorted(set(d) - {f.name for f in fields(cls)})
        if unknown:
            raise ConfigError(f"unknown train keys: {', '.join(unknown)}")
        return cls(**d)


@dataclass
class TrainRecord:
    step: int
    train_loss: float
    lr: float
    train_accuracy: float | None = None
    test_accuracy: float | None = None
    diagnostics: dict = field(default_factory=dict)


def sgd_update(params, grads, lr: float) -> None:
    for p, g in zip(params, grads):
        p.data -= lr * g


def training_loss(model: Model, x, labels, reg_lambda: float = 0.0, mode=Mode.TRAIN):
    """Cross-entropy plus ``reg_lambda`` times the RegNorm penalty summed over layers."""
    out = model.forward(x, mode)
    loss = T.softmax_cross_entropy(out.logits, labels)
    if reg_lambda and NormKind(model.config.norm).is_regnorm:
        loss = loss + reg_lambda * model.regularizer_total(out)
    return loss, out


def sgd_step(model: Model, x, labels, lr: float, reg_lambda: float = 0.0, step: int = 0) -> float:
    """One SGD step on L + reg_lambda * sum_l r_l; Batch Norm statistics update in the same pass.

    Raises :class:`Divergence` when the loss is non-finite or above 1e6.
    """
    if lr < 0:
        raise ParameterError(f"learning rate must be >= 0, got {lr}")
    loss, _ = training_loss(model, x, labels, reg_lambda)
    value = loss.item()
    if not np.isfinite(value) or value > DIVERGENCE_LOSS:
        raise Divergence(step, value)
    params = model.parameters()
    grads = T.backward(loss, params)
    if lr:
        sgd_update(params, grads, lr)
    return value


def accuracy_and_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, float]:
    labels = np.asarray(labels)
    acc = float(np.mean(np.argmax(logits, axis=1) == labels))
    return acc, T.softmax_cross_entropy(logits, labels).item()


def evaluate(model, x, labels, batch_size: int = 256, mode=Mode.EVAL) -> tuple[float, float]:
    """Accuracy and mean cross-entropy over a dataset, batch by batch (last partial batch included).

    Only non-mutating modes are allowed, so parameters and running
    statistics are untouched.  Products run batch-invariant, so a
    batch-independent model gives the same logits at every batch size.
    """
    mode = Mode(mode)
    if mode is Mode.TRAIN:
        raise ParameterError("evaluate runs in eval or batch_train mode")
    n = len(x)
    if n == 0:
        raise ParameterError("evaluate on an empty dataset")
    correct, total_loss = 0.0, 0.0
    for start in range(0, n, batch_size):
        xb, yb = x[start : start + batch_size], labels[start : start + batch_size]
        with T.batch_invariant():
            logits = model.forward(xb, mode).logits.data
        acc, loss = accuracy_and_loss(logits, yb)
        correct += acc * len(xb)
        total_loss += loss * len(xb)
    return correct / n, total_loss / n


class BatchStream:
    """Deterministic shuffled minibatches, reshuffled each epoch."""

    def __init__(self, x, y, batch_size: int, rng: np.random.Generator):
        if batch_size > len(x):
            raise ParameterError(f"batch size {batch_size} exceeds dataset size {len(x)}")
        self.x, self.y, self.batch_size, self.rng = x, y, batch_size, rng
        self._order = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self):
        if self._pos + self.batch_size > len(self._order):
            self._order = self.rng.permutation(len(self.x))
            self._pos = 0
        idx = self._order[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return self.x[idx], self.y[idx]


@dataclass
class TrainResult:
    model: Model
    records: list[TrainRecord]
    diverged_at: int | None = None

    @property
    def final(self) -> TrainRecord:
        return self.records[-1]


def train(
    config: TrainConfig,
    data: DatasetHandle,
    lr: float | None = None,
    hook: Callable[[int, Model], dict] | None = None,
    eval_every: int = 0,
) -> TrainResult:
    """Train a fresh model; divergence ends the run and is reported, not raised.

    ``hook(step, model)`` runs at step 0 and every ``config.diag_period``
    steps (and after the last step); its dict is attached to that step's
    record.  Test accuracy is computed at the end and every ``eval_every``
    steps when positive.
    """
    lr = config.lr if lr is None else lr
    model = build(config.model)
    stream = BatchStream(data.x_train, data.y_train, config.batch_size, T.make_rng(config.seed + 1))
    reg = config.effective_reg_lambda
    records: list[TrainRecord] = []
    period = config.diag_period

    def diag(step):
        return hook(step, model) if hook is not None else {}

    if hook is not None:
        records.append(TrainRecord(0, float("nan"), lr, diagnostics=diag(0)))
    for step in range(1, config.steps + 1):
        xb, yb = stream.next()
        try:
            loss = sgd_step(model, xb, yb, lr, reg, step)
        except Divergence as exc:
            log.info("lr=%g diverged at step %d", lr, step)
            records.append(TrainRecord(step, exc.loss, lr))
            return TrainResult(model, records, step)
        last = step == config.steps
        rec = TrainRecord(step, loss, lr)
        if hook is not None and period and (step % period == 0 or last):
            rec.diagnostics = diag(step)
        if last or (eval_every and step % eval_every == 0):
            rec.test_accuracy, _ = evaluate(model, data.x_test, data.y_test, config.eval_batch_size)
        records.append(rec)
    return TrainResult(model, records)


@dataclass
class GridResult:
    best_lr: float | None
    results: dict[float, TrainResult]

    @property
    def failed(self) -> bool:
        return self.best_lr is None

    @property
    def best(self) -> TrainResult | None:
        return None if self.best_lr is None else self.results[self.best_lr]


def lr_grid_search(config: TrainConfig, data: DatasetHandle, grid=DEFAULT_LR_GRID) -> GridResult:
    """Train once per learning rate; pick the best final test accuracy (ties go to the smaller lr)."""
    grid = sorted(float(g) for g in grid)
    if not grid:
        raise ParameterError("empty learning-rate grid")
    results = {lr: train(config, data, lr) for lr in grid}
    best_lr, best_acc = None, -1.0
    for lr in grid:
        res = results[lr]
        if res.diverged_at is not None:
            continue
        acc = res.final.test_accuracy
        if acc > best_acc:
            best_lr, best_acc = lr, acc
    return GridResult(best_lr, results)


def batch_size_sweep(config: TrainConfig, data: DatasetHandle, train_sizes, eval_sizes, lr: float | None = None):
    """Accuracy grid keyed by (train_size, eval_size, mode) at a fixed learning rate.

    Every model is evaluated with running statistics (``eval``) and with
    current-batch statistics (``batch_train``).  Diverged cells hold None.
    """
    grid = {}
    for bs in train_sizes:
        cfg = TrainConfig(**{**config.__dict__, "batch_size": bs})
        res = train(cfg, data, lr)
        for es in eval_sizes:
            for mode in (Mode.EVAL, Mode.BATCH_TRAIN):
                if res.diverged_at is not None:
                    grid[bs, es, mode.value] = None
                else:
                    grid[bs, es, mode.value] = evaluate(res.model, data.x_test, data.y_test, es, mode)[0]
    return grid
