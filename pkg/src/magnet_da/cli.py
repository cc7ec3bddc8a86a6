"""Command-line entry point: gen, train, eval, experiment, mmdcheck, gradcheck.

Exit codes: 0 success, 1 a self-check failed, 2 usage error, 3 runtime or
data error.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import shlex
import subprocess
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import report
from .config import ConfigFileError, build_configs, convert, load_config
from .data import DOMAINS, IMAGE_SIZES, Dataset, DatasetFormatError, DomainPair, ParameterError, generate_shapes
from .data import VocabularyMismatchError, read_dataset, write_dataset
from .losses import KernelError, KernelSpec
from .network import CheckpointError, ConfigError, MagnetModel, load_checkpoint, save_checkpoint
from .oracles import COMPONENTS, run_gradcheck, run_mmdcheck
from .train import METHODS, TASKS, TaskSpec, TrainConfig, evaluate, run_experiment, train

log = logging.getLogger("magnet_da")

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3


class UsageError(Exception):
    pass


class RuntimeFailure(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------- helpers


def _version() -> str:
    try:
        from importlib.metadata import version

        pkg = version("artifact")
    except Exception:
        pkg = "0+unknown"
    try:
        rev = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        ).stdout.strip()
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{pkg}+{rev}" if rev else pkg


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, payload: dict) -> None:
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    os.replace(tmp, path)


def _atomic(path: Path, writer) -> None:
    """Write through a temporary sibling so a failed write leaves nothing behind."""
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".part")
    os.close(fd)
    try:
        writer(tmp)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def _read(path) -> Dataset:
    p = Path(path)
    if not p.is_file():
        raise RuntimeFailure(f"no such dataset file: {p}")
    try:
        return read_dataset(p)
    except DatasetFormatError as exc:
        raise RuntimeFailure(f"{p}: {exc}") from exc


def _overrides(args) -> dict[str, object]:
    """Config values given on the command line (flags win over the config file)."""
    out: dict[str, object] = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = convert(key.strip(), value)
    for flag, key in (
        ("iterations", "iterations"),
        ("batch_size", "batch_size"),
        ("lr", "base_lr"),
        ("lambda_mmd", "lambda_mmd"),
        ("gamma_entropy", "gamma_entropy"),
        ("repetitions", "repetitions"),
        ("log_every", "log_every"),
    ):
        value = getattr(args, flag, None)
        if value is not None:
            out[key] = value
    if getattr(args, "kernel", None) is not None:
        out["kernel"] = KernelSpec.parse(args.kernel)
    if args.seed is not None:
        out["seed"] = args.seed
    return out


def _configs(args):
    values = load_config(args.config) if args.config else {}
    values.update(_overrides(args))
    return build_configs(values)


# ---------------------------------------------------------------- commands


def cmd_gen(args) -> int:
    if args.out is None:
        raise UsageError("gen: --out FILE is required")
    seed = 0 if args.seed is None else args.seed
    try:
        ds = generate_shapes(args.domain, args.classes, args.n, args.size, seed)
    except ParameterError as exc:
        raise UsageError(f"gen: {exc}") from exc
    out = Path(args.out)
    if not out.parent.is_dir():
        raise RuntimeFailure(f"output directory does not exist: {out.parent}")
    _atomic(out, lambda tmp: write_dataset(ds, tmp))
    if not args.quiet:
        for name, count in zip(ds.class_names, ds.class_counts()):
            print(f"{name}: {count}")
    print(f"wrote {len(ds)} images ({ds.num_classes} classes) to {out}")
    return EXIT_OK


def _manifest_base(args, argv, train_cfg, net_cfg, outputs) -> dict:
    return {
        "command": " ".join(shlex.quote(a) for a in argv),
        "version": _version(),
        "train_config": train_cfg.snapshot(),
        "network_config": dataclasses.asdict(net_cfg),
        "seeds": {"train": train_cfg.seed},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "started": _now(),
        "finished": None,
        "status": "running",
    }


def cmd_train(args, argv) -> int:
    if not args.source or not args.target or not args.out:
        raise UsageError("train: --source, --target and --out are required")
    train_cfg, net_cfg = _configs(args)
    source, target = _read(args.source), _read(args.target)
    try:
        pair = DomainPair(source, target)
    except VocabularyMismatchError as exc:
        raise RuntimeFailure(f"class vocabulary mismatch: {exc}") from exc
    _, c, h, w = source.images.shape
    if target.images.shape[1:] != (c, h, w):
        raise RuntimeFailure(f"source images are {c}×{h}×{w}, target images are {target.images.shape[1:]}")
    net_cfg = dataclasses.replace(net_cfg, input_channels=c, input_size=h, num_classes=source.num_classes)
    try:
        net_cfg.validate()
    except ConfigError as exc:
        raise UsageError(f"network config does not fit the data: {exc}") from exc

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "checkpoint": out / "model.dmck",
        "loss_csv": out / "loss.csv",
        "loss_png": out / "loss.png",
        "manifest": out / "manifest.json",
    }
    manifest = _manifest_base(args, argv, train_cfg, net_cfg, paths)
    manifest["inputs"] = {
        "source": {"path": str(args.source), "sha256": _sha256(args.source)},
        "target": {"path": str(args.target), "sha256": _sha256(args.target)},
    }
    _write_json(paths["manifest"], manifest)

    model = MagnetModel(net_cfg, seed=train_cfg.seed)
    every = max(1, train_cfg.iterations // 20)

    def progress(it, rep):
        if not args.quiet and (it % every == 0 or it == train_cfg.iterations - 1):
            mmd = " ".join(f"{m:.4f}" for m in rep.mmd_per_tap)
            print(f"iter {it:>6}  nll={rep.source_nll:.4f}  entropy={rep.target_entropy:.4f}  mmd=[{mmd}]", flush=True)

    result = train(model, pair, train_cfg, progress=progress)
    _atomic(paths["checkpoint"], lambda tmp: save_checkpoint(model, tmp))
    report.write_loss_csv(result, paths["loss_csv"])
    report.plot_loss_curves(result, paths["loss_png"], title=f"{Path(args.source).stem} → {Path(args.target).stem}")
    manifest.update(
        finished=_now(),
        status="complete",
        results={
            "source_acc": result.source_acc,
            "target_acc": result.final_target_acc,
            "wall_s": result.wall_time,
            "parameters": model.parameter_count(),
        },
    )
    _write_json(paths["manifest"], manifest)
    print(f"source_acc={result.source_acc:.4f}")
    if result.final_target_acc is not None:
        print(f"target_acc={result.final_target_acc:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    if not args.checkpoint or not args.data:
        raise UsageError("eval: --checkpoint and --data are required")
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise RuntimeFailure(f"no such checkpoint: {ckpt}")
    try:
        model = load_checkpoint(ckpt)
    except CheckpointError as exc:
        raise RuntimeFailure(f"{ckpt}: {exc}") from exc
    ds = _read(args.data)
    if ds.labels is None:
        raise RuntimeFailure(f"{args.data} carries no labels; cannot compute accuracy")
    cfg = model.config
    if ds.images.shape[1:] != (cfg.input_channels, cfg.input_size, cfg.input_size) or ds.num_classes != cfg.num_classes:
        raise RuntimeFailure(
            f"checkpoint expects {cfg.num_classes} classes of {cfg.input_channels}×{cfg.input_size}×{cfg.input_size} "
            f"images; data has {ds.num_classes} classes of {'×'.join(map(str, ds.images.shape[1:]))}"
        )
    print(f"accuracy={evaluate(model, ds):.4f}")
    return EXIT_OK


def cmd_experiment(args, argv) -> int:
    if not args.out:
        raise UsageError("experiment: --out DIR is required")
    train_cfg, net_cfg = _configs(args)
    names = [t.strip() for t in args.tasks.split(",") if t.strip()]
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    bad = [t for t in names if t not in TASKS] + [m for m in methods if m not in METHODS]
    if bad or not names or not methods:
        raise UsageError(f"experiment: unknown task/method {bad}; tasks {sorted(TASKS)}, methods {sorted(METHODS)}")
    overrides = {
        k: v
        for k, v in (
            ("classes", args.classes),
            ("n_source", args.n_source),
            ("n_target", args.n_target),
            ("image_size", args.size),
        )
        if v is not None
    }
    try:
        tasks = [dataclasses.replace(TASKS[t], **overrides) for t in names]
        for t in tasks:
            dataclasses.replace(net_cfg, input_size=t.image_size).validate()
    except ConfigError as exc:
        raise UsageError(f"experiment: {exc}") from exc
    if train_cfg.repetitions < 1:
        raise UsageError("experiment: repetitions must be >= 1")

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "results": out / "results.csv",
        "summary": out / "summary.csv",
        "accuracy_png": out / "accuracy.png",
        "entropy_png": out / "entropy.png",
        "manifest": out / "manifest.json",
    }
    manifest = _manifest_base(args, argv, train_cfg, net_cfg, paths)
    manifest["tasks"] = [dataclasses.asdict(t) for t in tasks]
    manifest["methods"] = methods
    manifest["seeds"]["runs"] = list(range(train_cfg.seed, train_cfg.seed + train_cfg.repetitions))
    _write_json(paths["manifest"], manifest)

    def on_run(row):
        if not args.quiet:
            print(f"{row.task} {row.method} seed={row.seed} source_acc={row.source_acc:.4f} "
                  f"target_acc={row.target_acc:.4f} ({row.wall_s:.1f}s)", flush=True)

    result = run_experiment(tasks, train_cfg, net_cfg, methods=methods, on_run=on_run)
    aggregates = result.aggregates()
    report.write_results_csv(result, paths["results"])
    report.write_summary_csv(aggregates, paths["summary"])
    report.plot_accuracy_bars(aggregates, paths["accuracy_png"])
    report.plot_entropy_traces(result, paths["entropy_png"])
    for a in aggregates:
        print(f"{a.task:<16} {a.method:<12} {a.mean:.4f} ± {a.std:.4f} (n={a.n})")
    manifest.update(finished=_now(), status="complete", summary=[dataclasses.asdict(a) for a in aggregates])
    _write_json(paths["manifest"], manifest)
    return EXIT_OK


def cmd_mmdcheck(args) -> int:
    if args.instances < 1 or args.n < 1 or args.d < 1:
        raise UsageError("mmdcheck: --instances, --n and --d must be positive")
    res = run_mmdcheck(args.instances, args.n, args.d, seed=0 if args.seed is None else args.seed)
    print(f"instances={res.instances} sizes<={args.n}x{args.d} bandwidth_dev={res.max_bandwidth_dev:.3e}")
    print(res.summary())
    return EXIT_OK if res.passed else EXIT_CHECK_FAILED


def cmd_gradcheck(args) -> int:
    comps = None
    if args.component:
        comps = [c.strip() for item in args.component for c in item.split(",") if c.strip()]
        unknown = [c for c in comps if c not in COMPONENTS]
        if unknown:
            raise UsageError(f"gradcheck: unknown component(s) {unknown}; choose from {sorted(COMPONENTS)}")
    if args.corrupt is not None and args.corrupt not in COMPONENTS:
        raise UsageError(f"gradcheck: unknown component {args.corrupt!r}")
    suite = run_gradcheck(comps, seed=0 if args.seed is None else args.seed, corrupt=args.corrupt)
    for line in suite.lines():
        print(line)
    print("PASS" if suite.passed else "FAIL")
    return EXIT_OK if suite.passed else EXIT_CHECK_FAILED


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="master seed (default 0)")
    common.add_argument("--out", default=None, help="output file (gen) or directory (train, experiment)")
    common.add_argument("--config", default=None, help="key = value config file")
    common.add_argument("--quiet", action="store_true", help="only print results")

    training = _Parser(add_help=False)
    training.add_argument("--iterations", type=int)
    training.add_argument("--batch-size", type=int)
    training.add_argument("--lr", type=float, help="base learning rate")
    training.add_argument("--lambda-mmd", type=float)
    training.add_argument("--gamma-entropy", type=float)
    training.add_argument("--kernel", help="median | median-ladder | comma-separated bandwidths")
    training.add_argument("--log-every", type=int)
    training.add_argument("--set", action="append", metavar="KEY=VALUE", help="any TrainConfig/NetworkConfig field")

    p = _Parser(prog="magnet-da", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", parents=[common], help="render a synthetic dataset to a DMDS file")
    g.add_argument("--domain", required=True, choices=DOMAINS)
    g.add_argument("--classes", type=int, default=6)
    g.add_argument("--n", type=int, default=1200)
    g.add_argument("--size", type=int, default=32, choices=IMAGE_SIZES)

    t = sub.add_parser("train", parents=[common, training], help="train on a source/target pair")
    t.add_argument("--source")
    t.add_argument("--target")

    e = sub.add_parser("eval", parents=[common], help="accuracy of a checkpoint on a labeled dataset")
    e.add_argument("--checkpoint")
    e.add_argument("--data")

    x = sub.add_parser("experiment", parents=[common, training], help="multi-seed comparison of methods")
    x.add_argument("--tasks", default="cad-photo,sketch-photo", help=f"comma list of {', '.join(TASKS)}")
    x.add_argument("--methods", default="magnet,source-only", help=f"comma list of {', '.join(METHODS)}")
    x.add_argument("--repetitions", type=int)
    x.add_argument("--classes", type=int)
    x.add_argument("--n-source", type=int)
    x.add_argument("--n-target", type=int)
    x.add_argument("--size", type=int, choices=IMAGE_SIZES)

    m = sub.add_parser("mmdcheck", parents=[common], help="vectorised MMD against a scalar loop oracle")
    m.add_argument("--instances", type=int, default=100)
    m.add_argument("--n", type=int, default=64, help="largest sample size")
    m.add_argument("--d", type=int, default=16, help="largest feature dimension")

    gc = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every gradient")
    gc.add_argument("--component", action="append", help=f"restrict to some of: {', '.join(COMPONENTS)}")
    gc.add_argument("--corrupt", help=argparse.SUPPRESS)
    return p


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
        if args.command == "gen":
            return cmd_gen(args)
        if args.command == "train":
            return cmd_train(args, ["magnet-da", *argv])
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "experiment":
            return cmd_experiment(args, ["magnet-da", *argv])
        if args.command == "mmdcheck":
            return cmd_mmdcheck(args)
        return cmd_gradcheck(args)
    except (UsageError, ConfigFileError, KernelError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeFailure, DatasetFormatError, CheckpointError, VocabularyMismatchError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
