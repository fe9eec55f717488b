"""Depth-profile and curvature diagnostics.

Representation and gradient correlation between two noise-perturbed copies
of a minibatch, gradient confusion across minibatches, per-layer gradient
norms, finite-difference Hessian-vector products and a stochastic Lanczos
estimate of the Hessian spectrum.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from scipy.linalg import eigh_tridiagonal

from . import tensor as T
from .errors import NumericError, ParameterError
from .models import Model
from .normalizers import Mode

NOISE_FRACTION = 0.01
BREAKDOWN_TOL = 1e-12


@dataclass
class DepthTrace:
    metric: str
    values: np.ndarray
    flags: list[str] = field(default_factory=list)
    step: int = 0
    fingerprint: str = ""

    def __len__(self):
        return len(self.values)

    def __getitem__(self, i):
        return self.values[i]


def pearson(a, b) -> tuple[float, str | None]:
    """Pearson correlation of two flattened arrays; NaN plus a flag when either is constant."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    da, db = a - a.mean(), b - b.mean()
    saa, sbb = da @ da, db @ db
    if saa == 0 or sbb == 0:
        return float("nan"), "zero-variance"
    # sqrt of the product keeps identical inputs at exactly 1
    r = float(da @ db / np.sqrt(saa * sbb))
    return min(1.0, max(-1.0, r)), None


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return T.make_rng(0 if rng is None else int(rng))


def _noise_std(x: np.ndarray, sigma_noise) -> np.ndarray | float:
    if sigma_noise is None:
        std = x.std(axis=0)
        return NOISE_FRACTION * np.where(std > 0, std, 1.0)
    if np.any(np.asarray(sigma_noise) <= 0):
        raise ParameterError(f"sigma_noise must be > 0, got {sigma_noise}")
    return sigma_noise


def perturbed_pair(x, sigma_noise=None, rng=None, same_noise=False):
    """Two copies of the batch ``x`` with independent Gaussian noise."""
    x = np.asarray(x, dtype=np.float64)
    rng = _rng(rng)
    std = _noise_std(x, sigma_noise)
    e1 = rng.standard_normal(x.shape) * std
    e2 = e1 if same_noise else rng.standard_normal(x.shape) * std
    return x + e1, x + e2


def _trace(metric, pairs) -> DepthTrace:
    values, flags = [], []
    for layer, (a, b) in enumerate(pairs, start=1):
        r, flag = pearson(a, b)
        values.append(r)
        if flag:
            flags.append(f"layer {layer}: {flag}")
    return DepthTrace(metric, np.array(values), flags)


def info_prop_correlation(
    model: Model, x, sigma_noise=None, rng=None, mode=Mode.BATCH_TRAIN, same_noise=False
) -> DepthTrace:
    """Per-layer correlation of pre-activations between corr(x + e1, x + e2)."""
    x1, x2 = perturbed_pair(x, sigma_noise, rng, same_noise)
    c1 = model.forward(x1, mode, capture=True).captures
    c2 = model.forward(x2, mode, capture=True).captures
    return _trace("infoprop_corr", ((a.preact.data, b.preact.data) for a, b in zip(c1, c2)))


def _activation_grads(model: Model, x, labels, mode) -> list[np.ndarray]:
    out = model.forward(x, mode, capture=True)
    loss = T.softmax_cross_entropy(out.logits, labels)
    return T.backward(loss, [c.preact for c in out.captures])


def gradient_correlation_layers(
    model: Model, x, labels, sigma_noise=None, rng=None, mode=Mode.BATCH_TRAIN, same_noise=False
) -> DepthTrace:
    """Per-layer correlation of loss gradients w.r.t. pre-activations for two perturbed batches."""
    x1, x2 = perturbed_pair(x, sigma_noise, rng, same_noise)
    g1 = _activation_grads(model, x1, labels, mode)
    g2 = _activation_grads(model, x2, labels, mode)
    return _trace("grad_corr", zip(g1, g2))


@dataclass
class ConfusionResult:
    per_pair: list[float]
    mean: float
    flags: list[str] = field(default_factory=list)


def confusion_from_gradients(grads) -> ConfusionResult:
    """Mean pairwise Pearson correlation over a list of gradient vectors."""
    if len(grads) < 2:
        raise ParameterError("gradient confusion needs at least two minibatches")
    per_pair, flags = [], []
    for (i, a), (j, b) in itertools.combinations(enumerate(grads), 2):
        r, flag = pearson(a, b)
        per_pair.append(r)
        if flag:
            flags.append(f"pair ({i},{j}): {flag}")
    return ConfusionResult(per_pair, float(np.mean(per_pair)), flags)


def last_layer_gradient(model: Model, x, labels, mode=Mode.BATCH_TRAIN) -> np.ndarray:
    layer = model.layers[-1]
    loss = T.softmax_cross_entropy(model.forward(x, mode).logits, labels)
    gw, gb = T.backward(loss, [layer.weight, layer.bias])
    return np.concatenate([gw.ravel(), gb.ravel()])


def input_gradient(model: Model, x, labels, mode=Mode.BATCH_TRAIN) -> np.ndarray:
    xt = T.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
    loss = T.softmax_cross_entropy(model.forward(xt, mode).logits, labels)
    return T.backward(loss, [xt])[0].ravel()


def gradient_confusion(model: Model, batches, mode=Mode.BATCH_TRAIN, wrt="params") -> ConfusionResult:
    """Gradient correlation across distinct minibatches ``[(x, labels), ...]``.

    ``wrt="params"`` uses the last layer's parameter gradients,
    ``wrt="input"`` the gradients w.r.t. the input batch (batches must then
    share a shape).
    """
    fn = last_layer_gradient if wrt == "params" else input_gradient
    return confusion_from_gradients([fn(model, x, y, mode) for x, y in batches])


@dataclass
class GradNormProfile:
    trace: DepthTrace
    ratio: float
    flags: list[str] = field(default_factory=list)


def gradient_norm_profile(model: Model, x, labels, mode=Mode.BATCH_TRAIN) -> GradNormProfile:
    """L2 norm of each layer's weight+bias gradient, and first/last ratio."""
    loss = T.softmax_cross_entropy(model.forward(x, mode).logits, labels)
    wanted = [p for layer in model.layers for p in (layer.weight, layer.bias)]
    grads = T.backward(loss, wanted)
    norms = np.array(
        [np.sqrt(np.sum(gw * gw) + np.sum(gb * gb)) for gw, gb in zip(grads[::2], grads[1::2])]
    )
    flags = []
    if norms[-1] == 0:
        ratio = float("nan")
        flags.append("last-layer gradient norm is zero")
    else:
        ratio = float(norms[0] / norms[-1])
    return GradNormProfile(DepthTrace("grad_norm", norms), ratio, flags)


# ------------------------------------------------------------------ curvature


class Objective(Protocol):
    def get_flat(self) -> np.ndarray: ...

    def set_flat(self, flat: np.ndarray) -> None: ...

    def gradient(self) -> np.ndarray: ...


class ModelObjective:
    """Cross-entropy on a fixed batch as a function of the flat parameter vector."""

    def __init__(self, model: Model, x, labels, mode=Mode.BATCH_TRAIN):
        self.model = model
        self.x = np.asarray(x, dtype=np.float64)
        self.labels = np.asarray(labels)
        self.mode = mode

    def get_flat(self):
        return self.model.get_flat()

    def set_flat(self, flat):
        self.model.set_flat(flat)

    def loss(self) -> float:
        return T.softmax_cross_entropy(self.model.forward(self.x, self.mode).logits, self.labels).item()

    def gradient(self):
        params = self.model.parameters()
        loss = T.softmax_cross_entropy(self.model.forward(self.x, self.mode).logits, self.labels)
        return np.concatenate([g.ravel() for g in T.backward(loss, params)])


def default_step(theta: np.ndarray) -> float:
    return 1e-4 * (1.0 + float(np.max(np.abs(theta))))


def hvp(objective: Objective, v, h: float | None = None) -> np.ndarray:
    """Hessian-vector product by central differences of the gradient along v/|v|.

    The objective's parameters are restored bit-for-bit before returning.
    """
    v = np.asarray(v, dtype=np.float64)
    vnorm = float(np.linalg.norm(v))
    if vnorm == 0:
        raise ParameterError("hvp direction must be nonzero")
    theta = objective.get_flat().copy()
    h = default_step(theta) if h is None else h
    vhat = v / vnorm
    try:
        objective.set_flat(theta + h * vhat)
        gp = objective.gradient()
        objective.set_flat(theta - h * vhat)
        gm = objective.gradient()
    finally:
        objective.set_flat(theta)
    if not (np.all(np.isfinite(gp)) and np.all(np.isfinite(gm))):
        raise NumericError("non-finite gradient inside hvp")
    out = (gp - gm) / (2.0 * h) * vnorm
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite gradient inside hvp")
    return out


@dataclass
class SpectrumEstimate:
    """Ritz values (ascending) and quadrature weights, one set per Lanczos probe."""

    ritz_values: list[np.ndarray]
    weights: list[np.ndarray]
    order: int
    num_probes: int
    seed: int | None = None
    flags: list[str] = field(default_factory=list)

    def all_values(self) -> np.ndarray:
        return np.concatenate(self.ritz_values)

    def density(self, grid, sigma_kernel: float | None = None) -> np.ndarray:
        """Gaussian-smoothed spectral density averaged over probes."""
        grid = np.asarray(grid, dtype=np.float64)
        if sigma_kernel is None:
            vals = self.all_values()
            sigma_kernel = 0.01 * max(float(vals.max() - vals.min()), 1e-12)
        dens = np.zeros_like(grid)
        for theta, w in zip(self.ritz_values, self.weights):
            z = (grid[:, None] - theta[None, :]) / sigma_kernel
            dens += (np.exp(-0.5 * z * z) / (sigma_kernel * np.sqrt(2 * np.pi))) @ w
        return dens / len(self.ritz_values)


def lanczos_tridiag(matvec: Callable, v0: np.ndarray, order: int):
    """Lanczos with full reorthogonalization. Returns (alphas, betas, broke_down)."""
    dim = v0.size
    q = np.zeros((order, dim))
    q[0] = v0 / np.linalg.norm(v0)
    alphas, betas = [], []
    for j in range(order):
        w = np.asarray(matvec(q[j]), dtype=np.float64).copy()
        alpha = float(q[j] @ w)
        w -= alpha * q[j]
        if j > 0:
            w -= betas[-1] * q[j - 1]
        for _ in range(2):
            w -= q[: j + 1].T @ (q[: j + 1] @ w)
        alphas.append(alpha)
        if j == order - 1:
            break
        beta = float(np.linalg.norm(w))
        if beta < BREAKDOWN_TOL:
            return np.array(alphas), np.array(betas), True
        betas.append(beta)
        q[j + 1] = w / beta
    return np.array(alphas), np.array(betas), False


def lanczos_spectrum(matvec: Callable, dim: int, order: int = 50, num_probes: int = 4, rng=None) -> SpectrumEstimate:
    """Stochastic Lanczos quadrature over ``num_probes`` Gaussian probes."""
    if order > dim:
        raise ParameterError(f"lanczos order {order} exceeds dimension {dim}")
    if order < 1 or num_probes < 1:
        raise ParameterError("order and num_probes must be >= 1")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = _rng(rng)
    values, weights, flags = [], [], []
    for p in range(num_probes):
        alphas, betas, broke = lanczos_tridiag(matvec, rng.standard_normal(dim), order)
        if broke:
            flags.append(f"probe {p}: breakdown after {len(alphas)} steps")
        if len(alphas) == 1:
            theta, vecs = alphas.copy(), np.ones((1, 1))
        else:
            theta, vecs = eigh_tridiagonal(alphas, betas)
        w = vecs[0] ** 2
        values.append(theta)
        weights.append(w / w.sum())
    return SpectrumEstimate(values, weights, order, num_probes, seed, flags)


def hessian_spectrum(model: Model, x, labels, order=50, num_probes=4, rng=None, mode=Mode.BATCH_TRAIN) -> SpectrumEstimate:
    obj = ModelObjective(model, x, labels, mode)
    dim = obj.get_flat().size
    return lanczos_spectrum(lambda v: hvp(obj, v), dim, min(order, dim), num_probes, rng)


def top_eigenvalues(spectrum: SpectrumEstimate, k: int) -> np.ndarray:
    """Estimates of the k largest eigenvalues.

    Each probe's i-th largest Ritz value lower-bounds the true i-th largest
    eigenvalue (Cauchy interlacing), so the maximum over probes is kept.
    """
    per_probe = []
    for theta in spectrum.ritz_values:
        if len(theta) < k:
            raise ParameterError(f"spectrum has {len(theta)} Ritz values, need {k}")
        per_probe.append(np.sort(theta)[::-1][:k])
    return np.max(per_probe, axis=0)


def outlier_ratio(spectrum: SpectrumEstimate, k: int = 10) -> tuple[float, str | None]:
    top = top_eigenvalues(spectrum, k)
    if top[-1] <= 0:
        return float("inf"), f"lambda_{k} <= 0"
    return float(top[0] / top[-1]), None


def lambda_max(spectrum: SpectrumEstimate) -> float:
    return float(top_eigenvalues(spectrum, 1)[0])
