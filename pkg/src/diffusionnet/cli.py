"""Command-line entry points: precompute, train, eval, verify, experiment.

Exit codes: 0 success, 1 threshold breach, 2 usage or input error.
The thread count of the numerical libraries follows ``DIFFUSIONNET_THREADS``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

from threadpoolctl import threadpool_limits

from .geometry import ShapeFormatError, load_shape, normalized
from .network import ConfigurationError, NetworkConfig, load_checkpoint
from .operators import CacheError, compute_operators, load_operators, save_operators

THREADS_ENV = "DIFFUSIONNET_THREADS"
EXIT_OK, EXIT_BREACH, EXIT_USAGE = 0, 1, 2

log = logging.getLogger("diffusionnet")


class ConfigError(ValueError):
    """Invalid config file; the message starts with the offending field path."""


# --------------------------------------------------------------------------
# Config validation

_TYPES = {int: (int,), float: (int, float), str: (str,), bool: (bool,), tuple: (list, tuple)}


def _check_fields(cls, d, path):
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected an object")
    known = {f.name: f for f in fields(cls)}
    for key, value in d.items():
        if key not in known:
            raise ConfigError(f"{path}.{key}: unknown field")
        default = known[key].default
        allowed = _TYPES.get(type(default))
        if allowed and (not isinstance(value, allowed)
                        or (isinstance(value, bool) and type(default) is not bool)):
            raise ConfigError(f"{path}.{key}: expected {type(default).__name__}, "
                              f"got {type(value).__name__}")
    try:
        return cls(**d)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _resolve(base, p):
    p = Path(p)
    return p if p.is_absolute() else base / p


def _parse_samples(entries, path, base):
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"{path}: expected a non-empty list of samples")
    out = []
    for i, e in enumerate(entries):
        where = f"{path}[{i}]"
        if not isinstance(e, dict):
            raise ConfigError(f"{where}: expected an object")
        for key in ("shape", "cache"):
            if not isinstance(e.get(key), str):
                raise ConfigError(f"{where}.{key}: required path string")
        extra = set(e) - {"shape", "cache", "labels", "class_label"}
        if extra:
            raise ConfigError(f"{where}.{sorted(extra)[0]}: unknown field")
        if "labels" not in e and "class_label" not in e:
            raise ConfigError(f"{where}: needs `labels` (per-vertex file) or `class_label`")
        if "class_label" in e and not isinstance(e["class_label"], int):
            raise ConfigError(f"{where}.class_label: expected int")
        out.append({"shape": _resolve(base, e["shape"]), "cache": _resolve(base, e["cache"]),
                    "labels": _resolve(base, e["labels"]) if "labels" in e else None,
                    "class_label": e.get("class_label")})
    return out


def parse_train_config(path):
    """Validate a training config file; returns a dict of parsed parts."""
    from .training import TrainConfig

    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ConfigError("config: expected an object")
    unknown = set(raw) - {"network", "training", "train", "test", "output_dir"}
    if unknown:
        raise ConfigError(f"config.{sorted(unknown)[0]}: unknown field")
    base = path.parent
    network = _check_fields(NetworkConfig, raw.get("network", {}), "network")
    training = _check_fields(TrainConfig, raw.get("training", {}), "training")
    if "train" not in raw:
        raise ConfigError("train: required list of samples")
    return {
        "network": network, "training": training,
        "train": _parse_samples(raw["train"], "train", base),
        "test": _parse_samples(raw["test"], "test", base) if "test" in raw else [],
        "output_dir": _resolve(base, raw.get("output_dir", "run")),
    }


def load_sample(entry, k):
    """Shape (normalized) + cached operators; the cache must come from
    ``precompute`` on the same file."""
    from .geometry import Shape
    from .training import Sample

    shape = normalized(load_shape(entry["shape"], labels=entry["labels"]))
    if entry["class_label"] is not None:
        shape = Shape(shape.geometry, labels=shape.labels, class_label=entry["class_label"],
                      name=shape.name)
    cache = Path(entry["cache"])
    if not (cache / "manifest.json").exists():
        raise CacheError(f"missing operator cache {cache} for {entry['shape']}; create it with "
                         f"`diffusionnet precompute --input {entry['shape']} --out {cache}`")
    ops = load_operators(cache, shape=shape, k=k)
    return Sample.from_shape(shape, ops)


# --------------------------------------------------------------------------
# Commands

def cmd_precompute(args):
    t0 = time.perf_counter()
    shape = normalized(load_shape(args.input, k_neighbors=args.knn))
    ops = compute_operators(shape, k=args.k)
    save_operators(ops, args.out)
    counts = " ".join(f"{k}={v}" for k, v in sorted(ops.stats.items()))
    print(f"V={ops.n_vertices} F={ops.n_faces} k={ops.k} "
          f"time={time.perf_counter() - t0:.2f}s {counts}".rstrip())
    print(f"wrote {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .training import fit

    cfg = parse_train_config(args.config)
    k = cfg["network"].k
    train = [load_sample(e, k) for e in cfg["train"]]
    test = [load_sample(e, k) for e in cfg["test"]]
    out = Path(cfg["output_dir"])
    params, history = fit(train, cfg["network"], cfg["training"], test_set=test or None,
                          log_path=out / "metrics.csv", checkpoint_dir=out, verbose=True)
    final = history[-1]
    print(f"final train_acc={final['train_acc']:.6f} test_acc={final['test_acc']:.6f}")
    print(f"checkpoint {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_eval(args):
    from .training import evaluate

    params, _ = load_checkpoint(args.checkpoint)
    path = Path(args.dataset)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict) or "samples" not in raw:
        raise ConfigError("dataset.samples: required list of samples")
    entries = _parse_samples(raw["samples"], "samples", path.parent)
    data = [load_sample(e, params.config.k) for e in entries]
    res = evaluate(data, params)
    print(json.dumps({"accuracy": res["accuracy"], "correct": res["correct"],
                      "total": res["total"]}))
    return EXIT_OK


def _emit_report(report, out):
    print(report.summary())
    if out:
        print(f"report {report.write(out)}")
    return EXIT_OK if report.passed else EXIT_BREACH


def cmd_verify(args):
    from .experiments import SUITES, record_verification, run_verify

    suites = SUITES if args.suite == "all" else (args.suite,)
    code = EXIT_OK
    for s in suites:
        report = run_verify(s)
        record_verification(report)
        code = max(code, _emit_report(report, args.out))
    return code


def cmd_experiment(args):
    from .experiments import VerificationRequired, require_verification, run_experiment

    try:
        require_verification()
    except VerificationRequired as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    overrides = {}
    if args.config:
        try:
            overrides = json.loads(Path(args.config).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
    try:
        report = run_experiment(args.name, overrides)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, FloatingPointError):
            raise
        raise ConfigError(f"experiment config: {exc}") from None
    return _emit_report(report, args.out)


def build_parser():
    from .experiments import EXPERIMENTS, SUITES

    p = argparse.ArgumentParser(prog="diffusionnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("precompute", help="build and cache geometric operators for a shape")
    s.add_argument("--input", required=True)
    s.add_argument("--k", type=int, default=128, help="eigenbasis size (default 128)")
    s.add_argument("--knn", type=int, default=30, help="point-cloud neighbors (default 30)")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_precompute)

    s = sub.add_parser("train", help="train from a JSON config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint on a dataset file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--dataset", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("verify", help="run numerical verification suites")
    s.add_argument("--suite", required=True, choices=SUITES + ("all",))
    s.add_argument("--out", default=None, help="directory for JSON/CSV reports")
    s.set_defaults(func=cmd_verify)

    s = sub.add_parser("experiment", help="run a desk-scale experiment")
    s.add_argument("--name", required=True, choices=EXPERIMENTS)
    s.add_argument("--config", default=None, help="JSON overrides of the experiment config")
    s.add_argument("--out", default="reports")
    s.set_defaults(func=cmd_experiment)
    return p


def _thread_limit():
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_thread_limit()):
            return args.func(args)
    except (ConfigError, ConfigurationError, CacheError, ShapeFormatError,
            FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
