"""Experiment runner: one experiment kind x a list of normalizers -> CSV files + manifest."""

from __future__ import annotations

import csv
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import diagnostics as D
from . import tensor as T
from .config import ExperimentConfig, canonical_json
from .data import DatasetHandle, load_dataset
from .models import build
from .normalizers import Mode
from .trainer import TrainConfig, batch_size_sweep, evaluate, lr_grid_search, train

log = logging.getLogger(__name__)

CSV_HEADER = ("experiment", "normalizer", "step", "layer", "metric", "value", "seed", "fingerprint")


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)) and not isinstance(v, bool):
        return str(int(v))
    return format(float(v), ".17g")


@dataclass
class Row:
    step: int
    layer: object
    metric: str
    value: float


@dataclass
class CellResult:
    normalizer: str
    rows: list[Row] = field(default_factory=list)
    extra: dict = field(default_factory=dict)
    summary: str = ""


def _minibatches(data: DatasetHandle, size: int, count: int, seed: int):
    rng = T.make_rng(seed + 7)
    n = len(data.x_test)
    size = min(size, n)
    for _ in range(count):
        idx = rng.choice(n, size, replace=False)
        yield data.x_test[idx], data.y_test[idx]


def _noise(x, frac):
    return frac * x.std(axis=0) + 1e-12


def _trace_rows(metric, values, step=0):
    return [Row(step, i + 1, metric, v) for i, v in enumerate(values)]


def _train_config(cfg: ExperimentConfig, norm: str, data: DatasetHandle) -> TrainConfig:
    t = cfg.section("train")
    return TrainConfig(
        model=cfg.model_config(norm, data.input_shape, data.num_classes),
        lr=t.get("lr", 0.1),
        reg_lambda=t.get("reg_lambda", 0.01),
        batch_size=t.get("batch_size", 64),
        eval_batch_size=t.get("eval_batch_size", 256),
        steps=t.get("steps", 200),
        diag_period=t.get("diag_period", 0),
        seed=cfg.seed,
    )


def _tuned_lr(cfg: ExperimentConfig, tc: TrainConfig, data: DatasetHandle) -> float:
    grid = cfg.section("train").get("lr_grid")
    if not grid:
        return tc.lr
    res = lr_grid_search(tc, data, grid)
    if res.failed:
        raise RuntimeError(f"every learning rate in {grid} diverged")
    return res.best_lr


def run_cell(cfg: ExperimentConfig, norm: str) -> CellResult:
    """Run one (experiment, normalizer) cell; pure given config and seed."""
    data = load_dataset(cfg.section("dataset"), cfg.seed)
    dg = cfg.section("diagnostics")
    frac = dg["noise_fraction"]
    cell = CellResult(norm)
    kind = cfg.experiment
    seed = cfg.seed

    if kind in ("infoprop", "grad_corr", "grad_norms"):
        model = build(cfg.model_config(norm, data.input_shape, data.num_classes))
        batches = list(_minibatches(data, dg["batch_size"], dg["num_batches"], seed))
        traces = []
        for b, (x, y) in enumerate(batches):
            if kind == "infoprop":
                traces.append(D.info_prop_correlation(model, x, _noise(x, frac), T.make_rng(seed * 1000 + b)).values)
            elif kind == "grad_corr":
                traces.append(D.gradient_correlation_layers(model, x, y, _noise(x, frac), T.make_rng(seed * 1000 + b)).values)
            else:
                prof = D.gradient_norm_profile(model, x, y)
                traces.append(np.append(prof.trace.values, prof.ratio))
        mean = np.nanmean(np.array(traces), axis=0)
        metric = {"infoprop": "infoprop_corr", "grad_corr": "grad_corr", "grad_norms": "grad_norm"}[kind]
        if kind == "grad_norms":
            cell.rows += _trace_rows(metric, mean[:-1])
            cell.rows.append(Row(0, "", "grad_norm_ratio", mean[-1]))
            cell.summary = f"first/last gradient norm ratio {mean[-1]:.4g}"
        else:
            cell.rows += _trace_rows(metric, mean)
            cell.summary = f"last-layer {metric} {mean[-1]:.4f}"
        return cell

    tc = _train_config(cfg, norm, data)

    if kind == "train_eval":
        lr = _tuned_lr(cfg, tc, data)
        res = train(tc, data, lr)
        for rec in res.records:
            cell.rows.append(Row(rec.step, "", "train_loss", rec.train_loss))
        if res.diverged_at is None:
            acc, loss = evaluate(res.model, data.x_test, data.y_test, tc.eval_batch_size, Mode.EVAL)
            cell.rows.append(Row(res.final.step, "", "test_accuracy", acc))
            cell.rows.append(Row(res.final.step, "", "test_loss", loss))
            cell.summary = f"lr={lr:g} test accuracy {acc:.4f}"
        else:
            cell.summary = f"lr={lr:g} diverged at step {res.diverged_at}"
        return cell

    if kind == "early_dynamics":
        lr = _tuned_lr(cfg, tc, data)
        batches = list(_minibatches(data, dg["batch_size"], dg["num_batches"], seed))

        def hook(step, model):
            x, y = batches[0]
            # last pre-activation layer; captures end with the logits
            out_corr = D.info_prop_correlation(model, x, _noise(x, frac), T.make_rng(seed + step)).values[-2]
            conf = D.gradient_confusion(model, batches).mean
            ratio = D.gradient_norm_profile(model, x, y).ratio
            acc = evaluate(model, data.x_test, data.y_test, tc.eval_batch_size, Mode.EVAL)[0]
            return {"output_corr": out_corr, "grad_confusion": conf, "grad_norm_ratio": ratio, "test_accuracy": acc}

        res = train(tc, data, lr, hook=hook)
        for rec in res.records:
            if not np.isnan(rec.train_loss):
                cell.rows.append(Row(rec.step, "", "train_loss", rec.train_loss))
            for k, v in rec.diagnostics.items():
                cell.rows.append(Row(rec.step, "", k, v))
        cell.summary = f"lr={lr:g} final loss {res.final.train_loss:.4g}"
        return cell

    if kind == "hessian":
        n = min(dg["hessian_samples"], len(data.x_train))
        hx, hy = data.x_train[:n], data.y_train[:n]
        spectra = {}

        def hook(step, model):
            spectrum = D.hessian_spectrum(model, hx, hy, dg["lanczos_order"], dg["num_probes"], T.make_rng(seed + step))
            ratio, _ = D.outlier_ratio(spectrum, dg["k"])
            spectra[step] = {
                "ritz_values": [v.tolist() for v in spectrum.ritz_values],
                "weights": [w.tolist() for w in spectrum.weights],
                "flags": spectrum.flags,
            }
            return {"lambda_max": D.lambda_max(spectrum), "outlier_ratio": ratio}

        res = train(tc, data, tc.lr, hook=hook)
        for rec in res.records:
            for k, v in rec.diagnostics.items():
                cell.rows.append(Row(rec.step, "", k, v))
        cell.extra["spectra"] = spectra
        last = [r for r in res.records if r.diagnostics][-1]
        cell.summary = f"step {last.step}: lambda_max {last.diagnostics['lambda_max']:.4g}, ratio {last.diagnostics['outlier_ratio']:.4g}"
        return cell

    if kind == "batch_sweep":
        sw = cfg.batch_sweep
        grid = batch_size_sweep(tc, data, sw["train_sizes"], sw["eval_sizes"])
        for (tr, ev, mode), acc in sorted(grid.items()):
            cell.rows.append(Row(tc.steps, f"train_bs={tr}/eval_bs={ev}", f"accuracy_{mode}", acc))
        cell.summary = f"{len(grid)} cells"
        return cell

    raise ValueError(f"unknown experiment {kind!r}")  # pragma: no cover


def _csv_text(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    w.writerows(rows)
    return buf.getvalue()


def write_results(cfg: ExperimentConfig, cells: list[CellResult], out_dir: Path) -> list[Path]:
    """One CSV per metric plus ``manifest.json`` (written last)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    fp = cfg.fingerprint()
    by_metric: dict[str, list] = {}
    for cell in cells:
        for r in cell.rows:
            by_metric.setdefault(r.metric, []).append(
                (cfg.experiment, cell.normalizer, r.step, r.layer, r.metric, format_value(r.value), cfg.seed, fp)
            )
    written = []
    for metric in sorted(by_metric):
        path = out_dir / f"{metric}.csv"
        path.write_text(_csv_text(by_metric[metric]), encoding="utf-8", newline="")
        written.append(path)
    spectra = {c.normalizer: c.extra["spectra"] for c in cells if "spectra" in c.extra}
    if spectra:
        path = out_dir / "spectra.json"
        path.write_text(json.dumps(spectra, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        written.append(path)
    manifest = {
        "normlab_version": __version__,
        "experiment": cfg.experiment,
        "fingerprint": fp,
        "seed": cfg.seed,
        "config": json.loads(canonical_json(cfg.to_dict())),
        "files": [p.name for p in written],
        "summaries": {c.normalizer: c.summary for c in cells},
    }
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    written.append(path)
    return written


def run_experiment(cfg: ExperimentConfig, out_dir=None, workers: int = 1) -> list[CellResult]:
    out_dir = Path(out_dir if out_dir is not None else cfg.output_dir)
    if workers > 1 and len(cfg.normalizers) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {n: pool.submit(run_cell, cfg, n) for n in cfg.normalizers}
            cells = [futures[n].result() for n in cfg.normalizers]
    else:
        cells = [run_cell(cfg, n) for n in cfg.normalizers]
    write_results(cfg, cells, out_dir)
    return cells
