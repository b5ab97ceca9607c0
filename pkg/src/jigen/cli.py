"""Command-line entry point: ``jigen <command> ...`` or ``python -m jigen <command> ...``.

Every command ends with one machine-parsable line ``RESULT key=value ...`` on
stdout. Timestamped logs go only to a log file, so stdout and every artifact
are byte-identical across reruns with the same flags and seed.

Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import evalkit
from .datasets import Dataset, read_manifest
from .patchwork import GridSpec
from .permgen import audit_set, generate_permutation_set, save_permutation_set
from .trainer import (
    TrainConfig,
    load_run,
    parse_kv,
    permutation_set,
    save_run,
    train_da,
    train_dg,
)

log = logging.getLogger("jigen")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _result(**kv) -> None:
    def fmt(v):
        return f"{v:.6f}" if isinstance(v, float) else str(v)
    print("RESULT " + " ".join(f"{k}={fmt(v)}" for k, v in kv.items()), flush=True)


def _setup_log(path: Optional[Path]) -> None:
    root = logging.getLogger()
    for h in list(root.handlers):
        root.removeHandler(h)
    if path is None:
        root.addHandler(logging.NullHandler())
        return
    path.parent.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(path, mode="a")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root.addHandler(handler)
    root.setLevel(logging.INFO)


def _fresh_dir(path: Path, force: bool) -> None:
    if path.exists() and any(path.iterdir()) and not force:
        raise UsageError(f"output directory {path} is not empty (use --force to overwrite)")
    path.mkdir(parents=True, exist_ok=True)


def _config(path: Optional[str], overrides: Sequence[str], seed: Optional[int]) -> TrainConfig:
    fields: Dict[str, str] = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"config file {p} not found")
        fields.update(parse_kv(p.read_text()))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        fields[key.strip()] = value.strip()
    if seed is not None:
        fields["seed"] = str(seed)
    try:
        return TrainConfig.from_fields(fields)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _datasets(manifest: str) -> List[Dataset]:
    p = Path(manifest)
    if not p.is_file():
        raise UsageError(f"manifest {p} not found")
    try:
        entries = read_manifest(p)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return [e.load() for e in entries]


def _concat(ds: Sequence[Dataset], name: str) -> Dataset:
    if len(ds) == 1:
        return ds[0]
    return Dataset(name, -1, np.concatenate([d.images for d in ds]), np.concatenate([d.labels for d in ds]), ds[0].C)


# --- commands --------------------------------------------------------------

def cmd_gen_perms(args) -> int:
    if args.tiles < 2 or args.perms < 1:
        raise UsageError("--tiles must be >= 2 and --perms >= 1")
    try:
        pset = generate_permutation_set(args.tiles, args.perms, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    save_permutation_set(pset, args.out)
    report = audit_set(pset)
    min_d = report.min_pairwise if report.min_pairwise is not None else "none"
    print(f"min pairwise Hamming distance: {min_d}")
    _result(tiles=args.tiles, perms=len(pset), seed=args.seed, min_pairwise=min_d, out=args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args.config, args.set, args.seed)
    out = Path(args.out)
    sources = _datasets(args.data)
    target = _concat(_datasets(args.target), "target") if args.target else None
    if args.mode == "da" and target is None:
        raise UsageError("--mode da needs --target MANIFEST (labels are never read)")
    _fresh_dir(out, args.force)
    _setup_log(out / "train.log")
    log.info("train mode=%s data=%s target=%s", args.mode, args.data, args.target)
    if args.mode == "da":
        model, metrics = train_da(cfg, sources, target)
    else:
        model, metrics = train_dg(cfg, sources)
    extra = {"mode": args.mode, "data": str(args.data)}
    result = {"mode": args.mode, "epochs": cfg.epochs, "seed": cfg.seed,
              "holdout_acc": metrics.records[-1].val_acc, "aux_acc": metrics.records[-1].jigsaw_acc}
    if target is not None:
        acc = evalkit.accuracy(model, target)
        extra["target_acc"] = f"{acc:.6f}"
        result["target_acc"] = acc
    save_run(model, metrics, cfg, out, extra)
    print(f"final holdout accuracy: {metrics.records[-1].val_acc:.4f}")
    _result(**result, out=out)
    return EXIT_OK


def cmd_eval(args) -> int:
    run = Path(args.run)
    _setup_log(Path(args.log) if args.log else None)
    bundle = load_run(run)  # RunLoadError is a runtime failure
    data = _concat(_datasets(args.data), "eval")
    model, cfg = bundle.model, bundle.cfg
    acc = evalkit.accuracy(model, data)
    print(f"accuracy: {acc:.4f} on {len(data)} images")
    result = {"accuracy": acc, "n": len(data)}
    if args.confusion:
        cm = evalkit.confusion_matrix(model, data)
        path = run / "confusion.csv"
        path.write_text(cm.to_csv())
        result["confusion"] = path
    if args.jigsaw:
        if cfg.aux_task != "jigsaw":
            raise UsageError("--jigsaw needs a model trained with aux_task=jigsaw")
        grid = GridSpec(cfg.grid, *data.images.shape[-2:])
        pset = permutation_set(grid.n_tiles, cfg.P, cfg.seed)
        jacc = evalkit.jigsaw_accuracy(model, data, pset, grid, seed=cfg.seed)
        print(f"jigsaw accuracy: {jacc:.4f} (chance {1 / cfg.P:.4f})")
        result.update(jigsaw_acc=jacc, chance=1 / cfg.P)
    if args.cam is not None:
        if not 0 <= args.cam < len(data):
            raise UsageError(f"--cam index {args.cam} outside [0, {len(data)})")
        img = data.images[args.cam]
        pred = int(evalkit.predict(model, data.subset([args.cam]))[0])
        paths = evalkit.write_cam(evalkit.cam(model, img, pred), run / f"cam_{args.cam}")
        result.update(cam_class=pred, cam=paths[0])
    _result(**result)
    return EXIT_OK


def cmd_sweep(args) -> int:
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    try:
        axis = evalkit.normalize_axis(args.axis)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.reps < 1:
        raise UsageError("--reps must be >= 1")
    cfg = _config(args.config, args.set, args.seed)
    sources = _datasets(args.data)
    target = _concat(_datasets(args.target), "target")
    out = Path(args.out)
    _fresh_dir(out, args.force)
    _setup_log(out / "sweep.log")
    try:
        report = evalkit.ablation_sweep(cfg, axis, values, args.reps, sources, target, mode=args.mode)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    evalkit.write_sweep(report, out)
    ok = sum(len(r.accuracies) for r in [report.baseline] + report.rows)
    failed = sum(len(r.failures) for r in [report.baseline] + report.rows)
    for row in [report.baseline] + report.rows:
        mean = "n/a" if row.mean is None else f"{row.mean:.4f}"
        print(f"{axis}={row.label}: mean target accuracy {mean} over {len(row.accuracies)} runs")
    _result(axis=axis, rows=len(report.rows), cells_ok=ok, cells_failed=failed, out=out)
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_synth_data(args) -> int:
    from .synthdigits import write_experiment_manifests

    out = Path(args.out)
    _fresh_dir(out, args.force)
    src, tgt = write_experiment_manifests(out, args.train, args.test, args.seed)
    _result(sources=src, target=tgt)
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def _config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key=value config file (defaults apply to absent keys)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--data", required=True, help="source dataset manifest")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="jigen", description="Jigsaw-regularized domain generalization on a numpy autodiff core.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-perms", help="generate a max-min Hamming permutation set")
    p.add_argument("--tiles", type=int, required=True)
    p.add_argument("--perms", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_perms)

    p = sub.add_parser("train", help="train a model (dg or da) and write a run bundle")
    p.add_argument("--mode", choices=("dg", "da"), default="dg")
    _config_flags(p)
    p.add_argument("--target", help="target manifest: unlabeled images for da; also scored when given")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a run bundle")
    p.add_argument("--run", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--confusion", action="store_true")
    p.add_argument("--jigsaw", action="store_true")
    p.add_argument("--cam", type=int, metavar="IMAGE_INDEX")
    p.add_argument("--log", help="log file (no logging when absent)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="ablation sweep with a Deep All reference row")
    p.add_argument("--axis", required=True, help="alpha, beta, P or grid")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("--mode", choices=("dg", "da"), default="dg")
    _config_flags(p)
    p.add_argument("--target", required=True, help="target manifest scored by every cell")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("synth-data", help="render the synthetic digit corpus and its manifests")
    p.add_argument("--out", required=True)
    p.add_argument("--train", type=int, default=10_000)
    p.add_argument("--test", type=int, default=2_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_synth_data)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse: 2 on bad usage, 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
