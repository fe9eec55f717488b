"""Figure-level experiments shared by the acceptance suite and scripts/.

Each function returns plain arrays or dicts keyed by normalizer so the
callers decide how to test or print them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diagnostics as D
from . import tensor as T
from .data import DatasetHandle, load_dataset
from .models import ModelConfig, build
from .normalizers import Mode
from .trainer import TrainConfig, evaluate, lr_grid_search, train


def noise_std(x: np.ndarray, fraction: float) -> np.ndarray:
    """Per-feature noise scale; constant pixels get a negligible floor."""
    return fraction * x.std(axis=0) + 1e-9


@dataclass
class InitSetup:
    """Shared settings for measurements on freshly initialized networks."""

    dataset: dict = field(default_factory=lambda: {"id": "digits"})
    kind: str = "mlp"
    depth: int = 20
    width: int = 128
    skip: bool = False
    batch_size: int = 16
    num_batches: int = 4
    noise_fraction: float = 0.1

    def model(self, norm: str, data: DatasetHandle, seed: int):
        return build(
            ModelConfig(
                kind=self.kind,
                depth=self.depth,
                width=self.width,
                skip=self.skip,
                norm=norm,
                input_shape=data.input_shape,
                num_classes=data.num_classes,
                seed=seed,
            )
        )


def infoprop_at_init(norms, seeds, setup: InitSetup | None = None) -> dict[str, np.ndarray]:
    """Representation correlation per layer, averaged over minibatches: {norm: (seeds, depth)}."""
    setup = setup or InitSetup()
    data = load_dataset(setup.dataset)
    out = {n: [] for n in norms}
    for seed in seeds:
        for n in norms:
            model = setup.model(n, data, seed)
            # the same minibatches and noise draws for every normalizer
            rng = T.make_rng(100 + seed)
            traces = []
            for _ in range(setup.num_batches):
                x = data.x_train[rng.choice(len(data.x_train), setup.batch_size, replace=False)]
                traces.append(D.info_prop_correlation(model, x, noise_std(x, setup.noise_fraction), rng).values)
            out[n].append(np.mean(traces, axis=0))
    return {n: np.array(v) for n, v in out.items()}


def grad_corr_at_init(norms, seeds, setup: InitSetup | None = None) -> dict[str, np.ndarray]:
    """Activation-gradient correlation per layer: {norm: (seeds, depth)}."""
    setup = setup or InitSetup()
    data = load_dataset(setup.dataset)
    out = {n: [] for n in norms}
    for seed in seeds:
        for n in norms:
            model = setup.model(n, data, seed)
            rng = T.make_rng(100 + seed)
            traces = []
            for _ in range(setup.num_batches):
                idx = rng.choice(len(data.x_train), setup.batch_size, replace=False)
                x, y = data.x_train[idx], data.y_train[idx]
                traces.append(D.gradient_correlation_layers(model, x, y, noise_std(x, setup.noise_fraction), rng).values)
            out[n].append(np.mean(traces, axis=0))
    return {n: np.array(v) for n, v in out.items()}


def grad_norm_ratios(norms, seeds, setup: InitSetup | None = None) -> dict[str, np.ndarray]:
    """First/last layer gradient-norm ratio at init on one minibatch per seed: {norm: (seeds,)}."""
    setup = setup or InitSetup(kind="wideresnet", depth=26, width=1, batch_size=32)
    data = load_dataset(setup.dataset)
    out = {n: [] for n in norms}
    for seed in seeds:
        idx = np.random.default_rng(100 + seed).choice(len(data.x_train), setup.batch_size, replace=False)
        x, y = data.x_train[idx], data.y_train[idx]
        for n in norms:
            out[n].append(D.gradient_norm_profile(setup.model(n, data, seed), x, y).ratio)
    return {n: np.array(v) for n, v in out.items()}


@dataclass
class DynamicsSetup:
    """No-skip conv net trained with SGD while diagnostics are recorded."""

    dataset: dict = field(default_factory=lambda: {"id": "digits"})
    depth: int = 26
    width: int = 1
    batch_size: int = 32
    steps: int = 2000
    period: int = 50
    noise_fraction: float = 0.1
    num_batches: int = 4
    lr: float = 0.1

    def train_config(self, norm: str, data: DatasetHandle, seed: int) -> TrainConfig:
        model = ModelConfig(
            kind="wideresnet",
            depth=self.depth,
            width=self.width,
            norm=norm,
            input_shape=data.input_shape,
            num_classes=data.num_classes,
            seed=seed,
        )
        return TrainConfig(model, lr=self.lr, batch_size=self.batch_size, steps=self.steps, diag_period=self.period, seed=seed)


def output_correlation_trace(norm: str, seed: int = 0, setup: DynamicsSetup | None = None):
    """Correlation at the last pre-activation layer through training.

    Returns (steps, correlations, final test accuracy).
    """
    setup = setup or DynamicsSetup()
    data = load_dataset(setup.dataset, seed)
    rng = np.random.default_rng(7)
    batches = [data.x_test[rng.choice(len(data.x_test), setup.batch_size, replace=False)] for _ in range(setup.num_batches)]

    def hook(step, model):
        vals = [
            D.info_prop_correlation(model, x, noise_std(x, setup.noise_fraction), T.make_rng(1000 + b)).values[-2]
            for b, x in enumerate(batches)
        ]
        return {"output_corr": float(np.mean(vals))}

    res = train(setup.train_config(norm, data, seed), data, hook=hook)
    recs = [r for r in res.records if r.diagnostics]
    acc = res.final.test_accuracy if res.diverged_at is None else float("nan")
    return np.array([r.step for r in recs]), np.array([r.diagnostics["output_corr"] for r in recs]), acc


def rise_then_fall(trace) -> tuple[float, float]:
    """Largest rise above the initial value, and the largest drop after that peak."""
    trace = np.asarray(trace)
    peak = int(np.argmax(trace))
    return float(trace[peak] - trace[0]), float(trace[peak] - trace[peak:].min())


def outlier_ratio_after_training(
    norm: str, seed: int, setup: DynamicsSetup | None = None, k: int = 10, order: int = 40, samples: int = 256
):
    """lambda_1 / lambda_k of the training-loss Hessian at the end of training, plus test accuracy."""
    setup = setup or DynamicsSetup()
    data = load_dataset(setup.dataset, seed)
    tc = setup.train_config(norm, data, seed)
    tc.diag_period = 0
    res = train(tc, data)
    if res.diverged_at is not None:
        return float("nan"), float("nan")
    spectrum = D.hessian_spectrum(res.model, data.x_train[:samples], data.y_train[:samples], order, 2, T.make_rng(seed))
    ratio, _ = D.outlier_ratio(spectrum, k)
    return ratio, res.final.test_accuracy


def batch_dependence(norm: str, eval_sizes, train_size: int = 32, steps: int = 1000, lr: float = 0.1, seed: int = 0,
                     dataset=None, depth: int = 3, width: int = 128):
    """Train one MLP, then evaluate at each eval batch size in eval and batch_train modes.

    Returns ({(eval_size, mode): accuracy}, {eval_size: logits in eval mode}).
    """
    data = load_dataset(dataset or {"id": "digits"}, seed)
    model = ModelConfig(kind="mlp", depth=depth, width=width, norm=norm, input_shape=data.input_shape,
                        num_classes=data.num_classes, seed=seed)
    res = train(TrainConfig(model, lr=lr, batch_size=train_size, steps=steps, seed=seed), data)
    acc, logits = {}, {}
    for es in eval_sizes:
        for mode in (Mode.EVAL, Mode.BATCH_TRAIN):
            acc[es, mode.value] = evaluate(res.model, data.x_test, data.y_test, es, mode)[0]
        with T.batch_invariant():
            logits[es] = np.concatenate(
                [res.model.forward(data.x_test[i : i + es], Mode.EVAL).logits.data for i in range(0, len(data.x_test), es)]
            )
    return acc, logits


def train_smoke(norm: str, grid=(1e-3, 1e-2, 1e-1, 1.0, 10.0), steps: int = 2000, depth: int = 2, width: int = 128,
                batch_size: int = 32, dataset=None, seed: int = 0):
    """Grid-searched test accuracy of a small MLP: (best lr, best accuracy)."""
    data = load_dataset(dataset or {"id": "digits"}, seed)
    model = ModelConfig(kind="mlp", depth=depth, width=width, norm=norm, input_shape=data.input_shape,
                        num_classes=data.num_classes, seed=seed)
    g = lr_grid_search(TrainConfig(model, batch_size=batch_size, steps=steps, seed=seed), data, grid)
    if g.failed:
        return None, float("nan")
    return g.best_lr, g.best.final.test_accuracy
