"""Command-line entry point.

Subcommands: augment, split, train, eval, predict, gradcheck, features.
Exit codes: 0 success, 1 usage or configuration problems, 2 data or
checkpoint problems, 3 numerical failures. Every run prints its resolved
configuration before doing any work.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfg
from . import data as D
from . import train as TR
from .augment import augment_dataset
from .checkpoint import load_checkpoint
from .errors import (CheckpointError, ConfigError, DataError, NumericalError,
                     ShapeError)
from .gradsuite import run_suite
from .metrics import (ConfusionMatrix, compute_metrics, one_vs_rest_aucs,
                      feature_projection, pr_curve, write_metrics_csv,
                      write_pr_csv, write_projection_csv)
from .model import GEOMETRIES, VARIANTS, build_variant

__all__ = ["main"]


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse with usage failures surfaced as exit code 1."""

    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}")


def _cap_threads(n: int) -> None:
    """Best-effort cap on BLAS/OpenMP worker threads."""
    if n < 1:
        raise ConfigError(f"--threads must be at least 1, got {n}")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def _resolve(args: argparse.Namespace, defaults: dict[str, object]) -> dict[str, object]:
    """Apply defaults < RSFME_SEED < config file < explicit flags."""
    file_values = None
    if getattr(args, "config", None):
        file_values = cfg.load_config_file(args.config)
    flags = {k: getattr(args, k) for k in defaults if getattr(args, k, None) is not None}
    merged = cfg.resolve(defaults, file_values, flags)
    for key in ("seed", "rounds", "threads", "stop_after", "epochs"):
        if key in merged and merged[key] is not None:
            merged[key] = cfg.coerce_int(key, merged[key])
    for key in ("test_fraction", "val_fraction", "dropout"):
        if key in merged:
            merged[key] = cfg.coerce_float(key, merged[key])
    print(cfg.format_resolved(merged))
    if merged.get("threads"):
        _cap_threads(merged["threads"])
    return merged


def _load_tree(root: str) -> D.Dataset:
    dataset = D.load_dataset(Path(root))
    if dataset.skipped:
        print(f"warning: skipped {dataset.skipped} unreadable file(s)")
    return dataset


def _split_arrays(dataset: D.Dataset, merged: dict, image_size: int):
    split = D.holdout_split(dataset, merged["test_fraction"],
                            merged["val_fraction"], merged["seed"])
    picks = {}
    for name, idx in (("train", split.train), ("val", split.validation),
                      ("test", split.test)):
        chosen = [dataset.samples[i] for i in idx]
        picks[name] = (TR.samples_to_arrays(chosen, image_size)
                       if chosen else (None, None))
    return split, picks


# -- subcommands ---------------------------------------------------------


def cmd_augment(args) -> int:
    merged = _resolve(args, {
        "data": args.data, "out": args.out, "rounds": 1, "seed": 0,
        "format": "png", "threads": None,
    })
    if merged["format"] not in ("jpg", "png", "raw"):
        raise ConfigError(f"unknown format {merged['format']!r}")
    dataset = _load_tree(merged["data"])
    produced = augment_dataset(dataset.samples, dataset.class_names,
                               Path(merged["out"]), rounds=merged["rounds"],
                               seed=merged["seed"], fmt=merged["format"])
    originals = sum(1 for s in dataset.samples if not s.augmented)
    print(f"augmented {originals} originals x {merged['rounds']} rounds "
          f"-> {len(produced)} images under {merged['out']}")
    return 0


def cmd_split(args) -> int:
    merged = _resolve(args, {
        "data": args.data, "out": None, "test_fraction": 0.2,
        "val_fraction": 0.2, "seed": 0, "threads": None,
    })
    dataset = _load_tree(merged["data"])
    split = D.holdout_split(dataset, merged["test_fraction"],
                            merged["val_fraction"], merged["seed"])
    lines = ["path,class,partition"]
    for part, idx in (("train", split.train), ("val", split.validation),
                      ("test", split.test)):
        for i in idx:
            s = dataset.samples[i]
            lines.append(f"{s.path},{dataset.class_names[s.label]},{part}")
    text = "\n".join(lines) + "\n"
    if merged["out"]:
        Path(merged["out"]).write_text(text)
    else:
        sys.stdout.write(text)
    for name, (tr, va, te) in split.per_class.items():
        print(f"{name}: train {tr}, val {va}, test {te}")
    print(f"total: train {len(split.train)}, val {len(split.validation)}, "
          f"test {len(split.test)}")
    return 0


def _train_defaults(args) -> dict[str, object]:
    return {
        "data": args.data, "out": args.out, "variant": "rs-fme-swint",
        "geometry": "tiny", "profile": TR.DEFAULT_PROFILE, "seed": 0,
        "dropout": 0.5, "test_fraction": 0.2, "val_fraction": 0.2,
        "stop_after": None, "resume": None, "threads": None,
    }


def cmd_train(args) -> int:
    if getattr(args, "tiny", False):
        args.geometry = "tiny"
    merged = _resolve(args, _train_defaults(args))
    if merged["variant"] not in VARIANTS:
        raise ConfigError(f"unknown variant {merged['variant']!r}")
    if merged["geometry"] not in GEOMETRIES:
        raise ConfigError(f"unknown geometry {merged['geometry']!r}")
    if merged["profile"] not in TR.PROFILES:
        raise ConfigError(f"unknown profile {merged['profile']!r}")
    geometry = GEOMETRIES[merged["geometry"]]
    profile = TR.PROFILES[merged["profile"]]
    dataset = _load_tree(merged["data"])
    split, picks = _split_arrays(dataset, merged, geometry.image_size)
    train_x, train_y = picks["train"]
    val_x, val_y = picks["val"]
    if train_x is None:
        raise DataError("the split left no training samples")

    out_dir = Path(merged["out"])
    if merged["resume"]:
        result = TR.resume(Path(merged["resume"]), train_x, train_y,
                           val_x, val_y, out_dir=out_dir)
    else:
        model = build_variant(merged["variant"], geometry,
                              classes=len(dataset.class_names),
                              dropout=merged["dropout"], seed=merged["seed"])
        snapshot = cfg.render_kv({
            "variant": merged["variant"],
            "geometry": merged["geometry"],
            "classes": len(dataset.class_names),
            "class_names": ";".join(dataset.class_names),
            "dropout": merged["dropout"],
            "model_seed": merged["seed"],
            "seed": merged["seed"],
            "profile": profile.name,
        })
        result = TR.train(model, train_x, train_y, val_x, val_y,
                          profile=profile, seed=merged["seed"],
                          out_dir=out_dir, config_snapshot=snapshot,
                          stop_after=merged["stop_after"])
    print(f"log: {result.log_path}")
    if result.best_epoch:
        print(f"best val accuracy {result.best_accuracy:.4f} at epoch "
              f"{result.best_epoch} -> {result.best_path}")
    return 0


def _model_from_checkpoint(path: str):
    ckpt = load_checkpoint(Path(path))
    model, values = TR.model_from_snapshot(ckpt.config_text)
    model.load_state_arrays(ckpt.arrays)
    model.eval()
    names = values.get("class_names", "")
    class_names = names.split(";") if names else [str(i) for i in range(model.classes)]
    return model, class_names


def cmd_eval(args) -> int:
    merged = _resolve(args, {
        "matrix": None, "data": None, "checkpoint": None, "out": "metrics.csv",
        "pr": None, "test_fraction": 0.2, "val_fraction": 0.2, "seed": 0,
        "threads": None,
    })
    if merged["matrix"]:
        cm = ConfusionMatrix.from_text(Path(merged["matrix"]))
        report = compute_metrics(cm)
    elif merged["data"] and merged["checkpoint"]:
        model, class_names = _model_from_checkpoint(merged["checkpoint"])
        dataset = _load_tree(merged["data"])
        if dataset.class_names != class_names:
            raise DataError(f"checkpoint classes {class_names} do not match "
                            f"dataset classes {dataset.class_names}")
        _, picks = _split_arrays(dataset, merged, model.geometry.image_size)
        x, y = picks["test"]
        if x is None:
            raise DataError("the split left no test samples")
        scores = TR.predict_scores(model, x)
        predicted = np.argmax(scores, axis=1)
        cm = ConfusionMatrix.from_predictions(predicted, y, class_names)
        aucs = one_vs_rest_aucs(scores, y, len(class_names))
        report = compute_metrics(cm, aucs)
        if merged["pr"]:
            curves = {name: pr_curve(scores[:, k], y == k)
                      for k, name in enumerate(class_names)}
            write_pr_csv(curves, Path(merged["pr"]))
            print(f"pr curves: {merged['pr']}")
    else:
        raise ConfigError("eval needs --matrix, or --data with --checkpoint")
    write_metrics_csv(report, Path(merged["out"]))
    print(f"overall accuracy {report.summary.accuracy:.2f}% "
          f"(+/- {report.summary.ci_half:.2f})")
    print(f"metrics: {merged['out']}")
    return 0


def cmd_predict(args) -> int:
    merged = _resolve(args, {
        "checkpoint": args.checkpoint, "threads": None,
    })
    model, class_names = _model_from_checkpoint(merged["checkpoint"])
    size = model.geometry.image_size
    for image_path in args.images:
        pixels = D.read_image(Path(image_path))
        x = D.resize(pixels, size).astype(np.float32)[None] / 255.0
        probs = TR.predict_scores(model, x)[0]
        winner = class_names[int(np.argmax(probs))]
        listed = " ".join(f"{name}={p:.4f}" for name, p in zip(class_names, probs))
        print(f"{image_path}: {winner} ({listed})")
    return 0


def cmd_gradcheck(args) -> int:
    merged = _resolve(args, {"tiny": True, "seed": 0, "only": None,
                             "threads": None})
    names = merged["only"].split(",") if merged["only"] else None
    results = run_suite(seed=merged["seed"], names=names)
    if not results:
        raise ConfigError(f"no gradient checks match {merged['only']!r}")
    failed = 0
    for entry, report in results:
        print(f"{entry.name}: {report}")
        failed += 0 if report.passed else 1
    if failed:
        raise NumericalError(f"{failed} gradient check(s) failed")
    print(f"all {len(results)} gradient checks passed")
    return 0


def cmd_features(args) -> int:
    merged = _resolve(args, {
        "data": args.data, "checkpoint": args.checkpoint,
        "out": "features.csv", "threads": None,
    })
    model, class_names = _model_from_checkpoint(merged["checkpoint"])
    dataset = _load_tree(merged["data"])
    x, y = TR.samples_to_arrays(dataset.samples, model.geometry.image_size)
    from .tensor import no_grad
    parts = []
    with no_grad():
        for start in range(0, x.shape[0], 16):
            parts.append(model.features(x[start:start + 16]).data)
    pooled = np.concatenate(parts, axis=0)
    coords = feature_projection(pooled)
    if coords is None:
        raise DataError("features carry no variance; nothing to project")
    ids = [str(s.path) for s in dataset.samples]
    labels = [dataset.class_names[int(lbl)] for lbl in y]
    write_projection_csv(ids, labels, coords, Path(merged["out"]))
    print(f"projection: {merged['out']} ({len(ids)} samples)")
    return 0


# -- parser wiring -------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="rsfme", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def common(p):
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--threads", type=int, help="cap worker threads")

    p = sub.add_parser("augment", help="write augmented copies of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rounds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--format", choices=("jpg", "png", "raw"))
    common(p)
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("split", help="stratified train/val/test manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--seed", type=int)
    common(p)
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("train", help="fit a variant on a dataset tree")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=sorted(VARIANTS))
    p.add_argument("--geometry", choices=sorted(GEOMETRIES))
    p.add_argument("--tiny", action="store_true",
                   help="shorthand for --geometry tiny")
    p.add_argument("--profile", choices=sorted(TR.PROFILES))
    p.add_argument("--seed", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--stop-after", dest="stop_after", type=int,
                   help="pause after this epoch; resume with --resume")
    p.add_argument("--resume", help="continue from a saved checkpoint")
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="metric tables from a matrix or model")
    p.add_argument("--matrix", help="confusion-matrix text file")
    p.add_argument("--data")
    p.add_argument("--checkpoint")
    p.add_argument("--out")
    p.add_argument("--pr", help="also write precision/recall curves here")
    p.add_argument("--test-fraction", dest="test_fraction", type=float)
    p.add_argument("--val-fraction", dest="val_fraction", type=float)
    p.add_argument("--seed", type=int)
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("predict", help="classify individual images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")
    common(p)
    p.set_defaults(fn=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient battery")
    p.add_argument("--tiny", action="store_true",
                   help="small double-precision geometry (the default)")
    p.add_argument("--seed", type=int)
    p.add_argument("--only", help="comma-separated entry names")
    common(p)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("features", help="2-D projection of pooled features")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    common(p)
    p.set_defaults(fn=cmd_features)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "fn", None):
            parser.error("a subcommand is required")
        return args.fn(args)
    except _UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (DataError, CheckpointError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericalError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except SystemExit as e:  # argparse --help
        return int(e.code or 0)


if __name__ == "__main__":
    sys.exit(main())
