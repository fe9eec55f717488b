"""Experiment configuration files (strict JSON schema)."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError
from .models import ModelConfig
from .normalizers import NormKind

EXPERIMENTS = ("infoprop", "grad_corr", "grad_norms", "early_dynamics", "hessian", "batch_sweep", "train_eval")
DATASET_IDS = ("synthetic", "mnist", "cifar10", "digits")

DATASET_KEYS = {"id", "n", "input_shape", "num_classes", "path", "n_train", "n_test"}
TRAIN_KEYS = {"lr", "lr_grid", "reg_lambda", "batch_size", "eval_batch_size", "steps", "diag_period"}
DIAG_KEYS = {"noise_fraction", "batch_size", "num_batches", "lanczos_order", "num_probes", "k", "hessian_samples"}
SWEEP_KEYS = {"train_sizes", "eval_sizes"}
TOP_KEYS = {"experiment", "normalizers", "seed", "output_dir", "dataset", "model", "train", "diagnostics", "batch_sweep"}
MODEL_KEYS = {"kind", "depth", "width", "skip", "activation", "init", "eps", "momentum"}

DEFAULTS = {
    "seed": 0,
    "output_dir": "results",
    "dataset": {"id": "synthetic", "n": 1000, "input_shape": [8, 8, 1], "num_classes": 10},
    "model": {"kind": "mlp", "depth": 4, "width": 64},
    "train": {"lr": 0.1, "reg_lambda": 0.01, "batch_size": 64, "eval_batch_size": 256, "steps": 200, "diag_period": 50},
    "diagnostics": {
        "noise_fraction": 0.01,
        "batch_size": 64,
        "num_batches": 4,
        "lanczos_order": 50,
        "num_probes": 4,
        "k": 10,
        "hessian_samples": 512,
    },
}

REQUIRED = {
    "infoprop": (),
    "grad_corr": (),
    "grad_norms": (),
    "early_dynamics": ("train",),
    "hessian": ("train",),
    "batch_sweep": ("train", "batch_sweep"),
    "train_eval": ("train",),
}


@dataclass
class ExperimentConfig:
    experiment: str
    normalizers: list[str]
    seed: int = 0
    output_dir: str = "results"
    dataset: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    diagnostics: dict = field(default_factory=dict)
    batch_sweep: dict = field(default_factory=dict)
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    def section(self, name: str) -> dict:
        """A section merged over its defaults."""
        return {**DEFAULTS.get(name, {}), **getattr(self, name)}

    def model_config(self, norm: str, input_shape, num_classes: int) -> ModelConfig:
        return ModelConfig(
            **self.section("model"), norm=norm, input_shape=tuple(input_shape), num_classes=num_classes, seed=self.seed
        )

    def to_dict(self) -> dict:
        return copy.deepcopy(self.raw)

    def fingerprint(self) -> str:
        return fingerprint(self.raw)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def fingerprint(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def _check_keys(section: str, given: dict, allowed: set, errors: list) -> None:
    if not isinstance(given, dict):
        errors.append(f"{section}: expected an object")
        return
    unknown = sorted(set(given) - allowed)
    if unknown:
        errors.append(f"unknown keys in {section}: {', '.join(unknown)}")


def parse(data: dict, strict: bool = True) -> ExperimentConfig:
    """Validate a decoded config dict; every problem is reported in one ConfigError."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    errors: list[str] = []
    if strict:
        _check_keys("config", data, TOP_KEYS, errors)
        for name, keys in (
            ("dataset", DATASET_KEYS),
            ("model", MODEL_KEYS),
            ("train", TRAIN_KEYS),
            ("diagnostics", DIAG_KEYS),
            ("batch_sweep", SWEEP_KEYS),
        ):
            if name in data:
                _check_keys(name, data[name], keys, errors)
    kind = data.get("experiment")
    if kind not in EXPERIMENTS:
        errors.append(f"experiment must be one of {', '.join(EXPERIMENTS)}; got {kind!r}")
    norms = data.get("normalizers")
    if not isinstance(norms, list) or not norms:
        errors.append("normalizers must be a non-empty list")
        norms = []
    valid = [k.value for k in NormKind]
    for n in norms:
        if n not in valid:
            errors.append(f"unknown normalizer {n!r}; valid options: {', '.join(valid)}")
    if kind in REQUIRED:
        for name in REQUIRED[kind]:
            if name not in data:
                errors.append(f"experiment {kind!r} requires a {name!r} section")
    ds = data.get("dataset", {})
    if isinstance(ds, dict) and ds.get("id", "synthetic") not in DATASET_IDS:
        errors.append(f"dataset id must be one of {', '.join(DATASET_IDS)}; got {ds.get('id')!r}")
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        errors.append(f"seed must be a non-negative integer, got {seed!r}")
    if errors:
        raise ConfigError("; ".join(errors))
    cfg = ExperimentConfig(
        experiment=kind,
        normalizers=list(norms),
        seed=seed,
        output_dir=data.get("output_dir", "results"),
        dataset=dict(data.get("dataset", {})),
        model=dict(data.get("model", {})),
        train=dict(data.get("train", {})),
        diagnostics=dict(data.get("diagnostics", {})),
        batch_sweep=dict(data.get("batch_sweep", {})),
        raw=copy.deepcopy(data),
    )
    # Model section must build for every normalizer before any compute starts.
    section = cfg.section("dataset")
    for n in cfg.normalizers:
        try:
            cfg.model_config(n, section.get("input_shape", [8, 8, 1]), section.get("num_classes", 10))
        except (ConfigError, TypeError) as exc:
            raise ConfigError(f"model section invalid: {exc}") from None
    return cfg


def loads(text: str, strict: bool = True) -> ExperimentConfig:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc}") from None
    return parse(data, strict)


def load(path, strict: bool = True) -> ExperimentConfig:
    return loads(Path(path).read_text(encoding="utf-8"), strict)


def dumps(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n"
