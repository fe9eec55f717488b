"""Command line entry point: ``normlab run|validate|datasets``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import config as C
from . import data as D
from .errors import ConfigError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def _load(path, strict: bool, seed=None):
    try:
        cfg = C.load(path, strict)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    if seed is not None:
        raw = cfg.to_dict()
        raw["seed"] = seed
        cfg = C.parse(raw, strict)
    return cfg


def run(config_path, out=None, seed=None, workers: int = 1, strict: bool = True, stream=None) -> int:
    """Validate then execute one config; returns the process exit code."""
    from .harness import run_experiment

    stream = stream or sys.stdout
    try:
        cfg = _load(config_path, strict, seed)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    out_dir = Path(out) if out else Path(cfg.output_dir)
    try:
        cells = run_experiment(cfg, out_dir, workers)
    except Exception as exc:  # runtime failures map to exit 2
        print(f"error: {cfg.experiment} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    for cell in cells:
        print(f"{cfg.experiment} {cell.normalizer}: {cell.summary}", file=stream)
    return EXIT_OK


def validate(config_path, strict: bool = True) -> int:
    try:
        cfg = _load(config_path, strict)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    print(f"ok: {cfg.experiment} x {len(cfg.normalizers)} normalizers, fingerprint {cfg.fingerprint()}")
    return EXIT_OK


def datasets_check() -> int:
    root = D.data_dir()
    print(f"data dir: {root.resolve()}")
    print(f"mnist:   {'found' if D.mnist_available() else 'missing'}")
    print(f"cifar10: {'found' if D.cifar10_available() else 'missing'}")
    try:
        import sklearn  # noqa: F401

        print("digits:  found (bundled with scikit-learn)")
    except ImportError:
        print("digits:  missing (scikit-learn not installed)")
    print("synthetic: always available")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="normlab", description="Normalizer diagnostics experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment config")
    r.add_argument("config")
    r.add_argument("--out", default=None, help="output directory (overrides output_dir)")
    r.add_argument("--seed", type=int, default=None, help="override the config seed")
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--strict", action="store_true", default=True, help="reject unknown keys (default)")
    r.add_argument("--lenient", dest="strict", action="store_false", help="ignore unknown keys")

    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")

    d = sub.add_parser("datasets", help="dataset utilities")
    d.add_argument("action", choices=["check"])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "run":
        return run(args.config, args.out, args.seed, args.workers, args.strict)
    if args.command == "validate":
        return validate(args.config)
    return datasets_check()


if __name__ == "__main__":
    sys.exit(main())
