"""``moretool`` command line: gen-data, train, eval, infer, ensemble, grad-check.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure (diverged training, failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import checkpoint, gradsuite
from .checkpoint import CheckpointError
from .data import DataError, SynthConfig, generate_synthetic, read_dataset, split, write_dataset
from .ensemble import AlignmentError, fuse, leave_one_out_weights, segmented_predict
from .metrics import MetricError, PredictionSet, evaluate, read_predictions, write_predictions
from .models import Model, ModelSpec, SpecError, predict
from .tensor import GradCheckError
from .training import TrainConfig, TrainingDivergence, prepare, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("moretool")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# config handling


def _read_json(path: Path, what: str) -> dict:
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid {what} JSON at line {exc.lineno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: {what} must be a JSON object")
    return data


def _overrides(pairs: Sequence[str]) -> dict:
    """``KEY=VALUE`` pairs; values are parsed as JSON, falling back to plain strings."""
    out = {}
    for pair in pairs or ():
        key, sep, raw = pair.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects KEY=VALUE, got {pair!r}")
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _resolve(config: Optional[Path], sets: Sequence[str], seed: Optional[int], what: str) -> dict:
    merged = _read_json(config, what) if config is not None else {}
    merged.update(_overrides(sets))
    if seed is not None:
        merged["seed"] = seed
    return merged


def _need_file(path: Optional[Path], what: str) -> None:
    if path is not None and not path.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


def _need_parent(path: Path) -> None:
    parent = path.parent if path.parent != Path("") else Path(".")
    if parent.exists() and not parent.is_dir():
        raise UsageError(f"output directory {parent} is not a directory")
    parent.mkdir(parents=True, exist_ok=True)


def _echo_config(path: Path, resolved: dict) -> None:
    path.write_text(json.dumps(resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _sidecar(out: Path) -> Path:
    return out.with_name(out.name + ".config.json")


def _load_spec(path: Path) -> ModelSpec:
    try:
        return ModelSpec.from_dict(_read_json(path, "model spec"))
    except (SpecError, TypeError) as exc:
        raise UsageError(f"{path}: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    _need_file(args.config, "config file")
    resolved = _resolve(args.config, args.set, args.seed, "synthetic config")
    try:
        cfg = SynthConfig.from_dict(resolved)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"synthetic config: {exc}") from None
    outputs = [args.out] + ([args.val_out] if args.val_out else []) + ([args.truth] if args.truth else [])
    for p in outputs:
        _need_parent(p)
    ds, truth = generate_synthetic(cfg)
    if args.val_out:
        train_ds, val_ds = split(ds, args.val_fraction, cfg.seed)
        write_dataset(train_ds, args.out)
        write_dataset(val_ds, args.val_out)
    else:
        write_dataset(ds, args.out)
    if args.truth:
        args.truth.write_text(json.dumps(truth, sort_keys=True) + "\n", encoding="utf-8")
    resolved = dict(vars(cfg), T_range=list(cfg.T_range))
    if args.val_out:
        resolved["val_fraction"] = args.val_fraction
    _echo_config(_sidecar(args.out), resolved)
    print(f"wrote {len(ds)} videos to {args.out}" + (f" (+ validation split {args.val_out})" if args.val_out else ""))
    return EXIT_OK


def cmd_train(args) -> int:
    for path, what in ((args.spec, "model spec"), (args.data, "training data"), (args.val, "validation data"),
                       (args.config, "training config")):
        _need_file(path, what)
    spec = _load_spec(args.spec)
    resolved = _resolve(args.config, args.set, args.seed, "training config")
    try:
        cfg = TrainConfig.from_dict(resolved)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"training config: {exc}") from None
    if args.out.exists() and not args.out.is_dir():
        raise UsageError(f"--out {args.out} exists and is not a directory")
    train_ds = read_dataset(args.data)
    val_ds = read_dataset(args.val) if args.val else None
    try:
        prepare(spec, train_ds)
    except ValueError as exc:
        raise DataError(f"{args.data}: {exc}") from None
    args.out.mkdir(parents=True, exist_ok=True)
    _echo_config(args.out / "config.json", {
        "spec": spec.to_dict(), "train": cfg.to_dict(),
        "data": str(args.data), "val": str(args.val) if args.val else None,
    })
    result = train(spec, train_ds, cfg, val_ds, out_dir=args.out)
    last = result.log[-1]
    print(f"trained {len(result.log)} epochs; final loss {last['loss']:.6f}, val GAP {last['gap']:.6f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    _need_file(args.pred, "prediction file")
    _need_file(args.data, "data file")
    if args.out:
        _need_parent(args.out)
    ds = read_dataset(args.data)
    preds = read_predictions(args.pred, ds.ids, ds.labels, ds.num_classes)
    report = evaluate(preds, args.k)
    text = json.dumps({"GAP": report.gap, "mAP": report.map, "PERR": report.perr, "k": args.k}, indent=2)
    print(text)
    if args.out:
        args.out.write_text(text + "\n", encoding="utf-8")
        _echo_config(_sidecar(args.out), {"pred": str(args.pred), "data": str(args.data), "k": args.k})
    return EXIT_OK


def cmd_infer(args) -> int:
    _need_file(args.ckpt, "checkpoint")
    _need_file(args.data, "data file")
    _need_parent(args.out)
    if args.weights is not None and len(args.weights) != args.segments + 1:
        raise UsageError(f"--weights needs {args.segments + 1} values (one per segment, then the global mean)")
    spec, params, _ = checkpoint.load(args.ckpt)
    ds = read_dataset(args.data)
    if args.segmented:
        if spec.frame_level:
            raise UsageError("--segmented applies to video-level models")
        if ds.kind != "frame":
            raise DataError(f"{args.data}: --segmented needs a frame-level dataset")
        if ds.dim != spec.input_dim:
            raise DataError(f"{args.data}: feature width {ds.dim} != model input_dim {spec.input_dim}")
        model = Model(spec, params)
        kwargs = {"weights": args.weights} if args.weights is not None else {}
        scores = segmented_predict(model, ds.examples, args.segments, **kwargs)
    else:
        try:
            ds = prepare(spec, ds)
        except ValueError as exc:
            raise DataError(f"{args.data}: {exc}") from None
        scores = predict(spec, params, ds.inputs())
    write_predictions(PredictionSet(ds.ids, scores, ds.labels), args.out, args.k)
    _echo_config(_sidecar(args.out), {
        "ckpt": str(args.ckpt), "data": str(args.data), "segmented": args.segmented,
        "segments": args.segments, "weights": args.weights, "k": args.k,
    })
    print(f"wrote predictions for {len(ds.ids)} videos to {args.out}")
    return EXIT_OK


def cmd_ensemble(args) -> int:
    for p in args.preds:
        _need_file(p, "prediction file")
    _need_file(args.data, "data file")
    _need_parent(args.out)
    if len(args.preds) < 2:
        raise UsageError("--preds needs at least two prediction files")
    names = args.names or [p.stem for p in args.preds]
    if len(names) != len(args.preds):
        raise UsageError("--names must match --preds one to one")
    ds = read_dataset(args.data)
    members = [read_predictions(p, ds.ids, ds.labels, ds.num_classes) for p in args.preds]
    report = leave_one_out_weights(members, names, lambda p: evaluate(p, args.k).gap, with_member_metrics=True)
    fused = fuse(members, report.weights)
    out = report.to_dict()
    fused_report = evaluate(fused, args.k)
    out["fused"] = {"GAP": fused_report.gap, "mAP": fused_report.map, "PERR": fused_report.perr}
    args.out.write_text(json.dumps(out, indent=2) + "\n", encoding="utf-8")
    if args.fused_out:
        _need_parent(args.fused_out)
        write_predictions(fused, args.fused_out, args.k)
    _echo_config(_sidecar(args.out), {
        "preds": [str(p) for p in args.preds], "names": names, "data": str(args.data), "k": args.k,
        "fused_out": str(args.fused_out) if args.fused_out else None,
    })
    for row in out["models"]:
        print(f"{row['name']}: weight {row['weight']:.4f}  GAP {row['GAP']:.5f}")
    print(f"fused GAP {out['fused']['GAP']:.5f}")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    _need_file(args.spec, "model spec")
    spec = _load_spec(args.spec)
    seed = args.seed if args.seed is not None else 0
    err = gradsuite.check_model(spec, seed, step=args.step)
    ok = err < args.tolerance
    print(f"max relative error {err:.3e} ({'ok' if ok else 'FAILED'}, tolerance {args.tolerance:g})")
    return EXIT_OK if ok else EXIT_NUMERIC


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moretool", description="Residual mixture-of-experts video classification toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def common(p, config_help=None):
        p.add_argument("--seed", type=int, default=None, help="seed for every random choice (overrides the config)")
        if config_help:
            p.add_argument("--config", type=Path, help=config_help)
            p.add_argument("--set", action="append", metavar="KEY=VALUE", default=[],
                           help="override a config key (VALUE parsed as JSON); repeatable")

    p = sub.add_parser("gen-data", help="generate a synthetic frame-level corpus")
    common(p, "JSON synthetic-corpus config")
    p.add_argument("--out", type=Path, required=True, help="dataset path (.jsonl or .bin)")
    p.add_argument("--val-out", type=Path, help="also split off a validation set to this path")
    p.add_argument("--val-fraction", type=float, default=0.2)
    p.add_argument("--truth", type=Path, help="write the generator description as JSON")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model")
    common(p, "JSON training config")
    p.add_argument("--spec", type=Path, required=True, help="JSON model spec")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--val", type=Path)
    p.add_argument("--out", type=Path, required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a prediction file")
    common(p)
    p.add_argument("--pred", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--out", type=Path, help="also write the metrics as JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict with a checkpoint")
    common(p)
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="prediction CSV")
    p.add_argument("--segmented", action="store_true", help="merge segment-mean and global-mean predictions")
    p.add_argument("--segments", type=int, default=3)
    p.add_argument("--weights", type=float, nargs="+", help="segment weights, then the global weight")
    p.add_argument("--k", type=int, default=20, help="predictions kept per video")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("ensemble", help="leave-one-out weighted fusion of prediction files")
    common(p)
    p.add_argument("--preds", type=Path, nargs="+", required=True)
    p.add_argument("--names", nargs="+")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="report JSON")
    p.add_argument("--fused-out", type=Path, help="also write the fused predictions")
    p.add_argument("--k", type=int, default=20)
    p.set_defaults(func=cmd_ensemble)

    p = sub.add_parser("grad-check", help="finite-difference check of a model's gradients")
    common(p)
    p.add_argument("--spec", type=Path, required=True)
    p.add_argument("--step", type=float, default=1e-3)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.set_defaults(func=cmd_grad_check)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergence, GradCheckError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, DataError, CheckpointError, MetricError, AlignmentError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
