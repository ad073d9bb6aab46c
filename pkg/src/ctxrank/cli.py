"""Command-line interface: ``ctxrank <command> --help`` lists every flag."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import datagen, decomposition, harness
from .dataset import checksum, dumps_dataset, loads_dataset
from .nncore import DivergenceError, TrainConfig
from .rankers import COMPATIBLE_LOSSES, DEFAULT_ARCH, ERR, check_compatible, dumps_model, loads_model, train_ranker

log = logging.getLogger("ctxrank")

MODEL_KINDS = sorted(DEFAULT_ARCH)
LOSSES = sorted({loss for losses in COMPATIBLE_LOSSES.values() for loss in losses})


class CliError(Exception):
    pass


def _parse_sizes(text: str) -> list[int]:
    sizes = []
    for part in text.split(","):
        if "-" in part:
            lo, hi = part.split("-")
            sizes.extend(range(int(lo), int(hi) + 1))
        else:
            sizes.append(int(part))
    return sizes


def _read_dataset(path):
    try:
        return loads_dataset(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read dataset: {exc}") from None


def _load_model(spec: str, dim: int, seed: int):
    if spec.startswith("oracle:"):
        return harness.OracleModel(spec.split(":", 1)[1], dim)
    if spec == "random":
        return harness.RandomModel(dim, seed)
    try:
        return loads_model(Path(spec).read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read model: {exc}") from None


# -- commands ---------------------------------------------------------------


def cmd_generate(args):
    try:
        spec = datagen.GeneratorSpec(args.problem, args.n_instances, args.n_objects, args.dim, args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    text = dumps_dataset(datagen.generate(spec))
    harness.atomic_write(args.out, text)
    print(f"instances: {spec.n_instances}")
    print(f"sha256: {checksum(text)}")


def _train_setup(args):
    arch, cfg, loss = harness.default_setup(args.model)
    if args.arch:
        arch.update(json.loads(args.arch))
    overrides = {
        "learning_rate": args.lr,
        "momentum": args.momentum,
        "epochs": args.epochs,
        "batch_size": args.batch_size,
        "l1": args.l1,
        "l2": args.l2,
    }
    fields = {**asdict(cfg), **{k: v for k, v in overrides.items() if v is not None}, "seed": args.seed}
    try:
        cfg = TrainConfig(**fields)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    return arch, cfg, args.loss or loss


def cmd_train(args):
    arch, cfg, loss = _train_setup(args)
    if args.model != ERR:
        try:
            check_compatible(args.model, loss)
        except ValueError as exc:
            raise CliError(str(exc)) from None
    data = _read_dataset(args.data)
    t0 = time.perf_counter()
    try:
        result = train_ranker(args.model, data, arch, loss, cfg)
    except DivergenceError as exc:
        raise CliError(f"training diverged at epoch {exc.epoch}: {exc}") from None
    header = {"command": "train", "model": args.model, "loss": loss, "arch": result.model.arch,
              "train": asdict(cfg), "data": str(args.data), "seed": args.seed}
    trace = harness.csv_report(header, ["epoch", "mean_loss"], [[i, v] for i, v in enumerate(result.loss_trace)])
    trace_path = args.trace or f"{args.out}.trace.csv"
    harness.atomic_write(args.out, dumps_model(result.model))
    harness.atomic_write(trace_path, trace)
    print(f"trained {args.model} on {len(data)} tasks in {time.perf_counter() - t0:.2f}s")
    if result.loss_trace:
        print(f"final training loss: {result.loss_trace[-1]:.6f}")


def cmd_evaluate(args):
    data = _read_dataset(args.data)
    model = _load_model(args.model, data.dim, args.seed)
    if model.dim != data.dim:
        raise CliError(f"model dimension {model.dim} does not match dataset dimension {data.dim}")
    metrics = harness.evaluate_model(model, data)
    rows = []
    for name in harness.METRICS:
        mean, std = harness.mean_std(metrics[name])
        rows.append([name, mean, std, len(data)])
        print(f"{name}: {mean:.4f} ± {std:.4f}")
    header = {"command": "evaluate", "model": args.model, "data": str(args.data), "seed": args.seed}
    if args.out:
        harness.atomic_write(args.out, harness.csv_report(header, ["metric", "mean", "std", "n"], rows))


def cmd_generalize(args):
    sizes = _parse_sizes(args.sizes)
    if any(s < 2 for s in sizes):
        raise CliError("task sizes must be at least 2")
    model = _load_model(args.model, args.dim, args.seed)
    rows = harness.generalization_sweep(model, args.problem, sizes, args.n_instances, args.dim, args.seed)
    for size, mean, std in rows:
        print(f"size {size:3d}: d_RA {mean:.4f} ± {std:.4f}")
    header = {"command": "generalize", "model": args.model, "problem": args.problem, "sizes": sizes,
              "n_instances": args.n_instances, "dim": args.dim, "seed": args.seed}
    harness.atomic_write(args.out, harness.csv_report(header, ["size", "d_ra_mean", "d_ra_std"], rows))


def cmd_verify_feta(args):
    if not 1 <= args.n_objects <= decomposition.MAX_UNIVERSE:
        raise CliError(f"--n-objects must be in [1, {decomposition.MAX_UNIVERSE}]")
    if args.epsilon <= 0:
        raise CliError("--epsilon must be positive")
    rng = np.random.default_rng(args.seed)
    total_queries, failures, margin = 0, [], float("inf")
    for trial in range(args.trials):
        rho = decomposition.random_ranking_function(args.n_objects, rng)
        tables = decomposition.construct_feta_tables(rho, args.epsilon, args.n_objects)
        report = decomposition.verify_reconstruction(rho, tables)
        total_queries += report.n_queries
        margin = min(margin, report.min_margin)
        failures.extend((trial, q) for q in report.mismatches)
    lines = [
        f"n_objects: {args.n_objects}",
        f"trials: {args.trials}",
        f"epsilon: {args.epsilon!r}",
        f"seed: {args.seed}",
        f"queries: {total_queries}",
        f"mismatches: {len(failures)}",
        f"min_margin: {margin!r}",
    ]
    lines += [f"mismatch: trial {t} query {list(q)}" for t, q in failures]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if args.out:
        harness.atomic_write(args.out, text)
    return 1 if failures else 0


def cmd_search(args):
    data = _read_dataset(args.data)
    if args.model == ERR:
        raise CliError("ERR has no hyperparameters to search")
    try:
        result = harness.random_search(
            args.model, data, args.budget, args.seed, args.loss, args.validation_fraction,
            include_default=not args.no_default,
        )
    except ValueError as exc:
        raise CliError(str(exc)) from None
    except DivergenceError as exc:
        raise CliError(str(exc)) from None
    header = {"command": "search", "model": args.model, "loss": args.loss, "data": str(args.data),
              "budget": args.budget, "seed": args.seed, "validation_fraction": args.validation_fraction}
    rows = [[t["trial"], t["d_ra"], json.dumps(t["params"], sort_keys=True).replace(",", ";")] for t in result.trials]
    harness.atomic_write(args.out, harness.csv_report(header, ["trial", "val_d_ra", "params"], rows))
    if args.best:
        best = {"arch": result.arch, "train": asdict(result.cfg), "val_d_ra": result.score}
        harness.atomic_write(args.best, json.dumps(best, indent=2, sort_keys=True) + "\n")
    print(f"best validation d_RA: {result.score:.4f}")


def cmd_benchmark(args):
    try:
        spec = datagen.GeneratorSpec(args.problem, args.n_instances, args.n_objects, args.dim, args.seed)
        cfg = harness.ExperimentConfig(spec, args.train_fraction, args.repetitions,
                                       tuple(args.models.split(",")), master_seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    reports = harness.run_experiment(cfg)
    rows = harness.experiment_rows(reports)
    for kind, rep in reports.items():
        summary = rep.summary()
        print(f"{kind:8s} " + "  ".join(f"{m} {summary[m][0]:.3f}±{summary[m][1]:.3f}" for m in harness.METRICS)
              + f"  ({rep.seconds['train']:.1f}s train)")
    header = {"command": "benchmark", "generator": asdict(spec), "train_fraction": args.train_fraction,
              "repetitions": args.repetitions, "models": args.models, "seed": args.seed,
              "setups": {k: {"arch": cfg.setup(k)[0], "train": asdict(cfg.setup(k)[1]), "loss": cfg.setup(k)[2]}
                         for k in cfg.kinds}}
    columns = ["model", "metric", "mean", "std"] + [f"rep{i}" for i in range(args.repetitions)]
    harness.atomic_write(args.out, harness.csv_report(header, columns, rows))


# -- parser -----------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = argparse.ArgumentParser(prog="ctxrank", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic benchmark dataset", formatter_class=fmt)
    p.add_argument("--problem", choices=[datagen.MEDOID, datagen.HYPERVOLUME], required=True)
    p.add_argument("--n-instances", type=int, default=1000)
    p.add_argument("--n-objects", type=int, default=5)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output JSONL path")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a ranker on a dataset", formatter_class=fmt)
    p.add_argument("--model", choices=MODEL_KINDS, required=True)
    p.add_argument("--loss", choices=LOSSES, default=None, help="default: the model's committed loss")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="model output path")
    p.add_argument("--trace", default=None, help="loss trace CSV (default: <out>.trace.csv)")
    p.add_argument("--arch", default=None, help="JSON object overriding architecture keys")
    p.add_argument("--epochs", type=int, default=None, help="default: committed per-model value")
    p.add_argument("--lr", type=float, default=None, help="default: committed per-model value")
    p.add_argument("--momentum", type=float, default=None, help="default: committed per-model value")
    p.add_argument("--batch-size", type=int, default=None, help="default: committed per-model value")
    p.add_argument("--l1", type=float, default=None, help="default: committed per-model value")
    p.add_argument("--l2", type=float, default=None, help="default: committed per-model value")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a dataset with a trained model", formatter_class=fmt)
    p.add_argument("--model", required=True, help="model file, 'random', or 'oracle:<problem>'")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="metrics CSV path")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("generalize", help="ranking accuracy across task sizes", formatter_class=fmt)
    p.add_argument("--model", required=True)
    p.add_argument("--problem", choices=[datagen.MEDOID, datagen.HYPERVOLUME], default=datagen.MEDOID)
    p.add_argument("--sizes", default="3-24", help="comma list and/or ranges, e.g. 3-10,16")
    p.add_argument("--n-instances", type=int, default=1000, help="fresh instances per size")
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_generalize)

    p = sub.add_parser("verify-feta", help="check the exact FETA construction on random ranking functions",
                       formatter_class=fmt)
    p.add_argument("--n-objects", type=int, default=4)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--epsilon", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None, help="report path")
    p.set_defaults(func=cmd_verify_feta)

    p = sub.add_parser("search", help="seeded random hyperparameter search", formatter_class=fmt)
    p.add_argument("--model", choices=MODEL_KINDS, required=True)
    p.add_argument("--loss", choices=LOSSES, default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--budget", type=int, default=10)
    p.add_argument("--validation-fraction", type=float, default=0.2)
    p.add_argument("--no-default", action="store_true", help="do not spend trial 0 on the committed defaults")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="trial log CSV")
    p.add_argument("--best", default=None, help="JSON path for the best configuration")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("benchmark", help="repeated train/test comparison of rankers", formatter_class=fmt)
    p.add_argument("--problem", choices=[datagen.MEDOID, datagen.HYPERVOLUME], default=datagen.MEDOID)
    p.add_argument("--n-instances", type=int, default=100000)
    p.add_argument("--n-objects", type=int, default=5)
    p.add_argument("--dim", type=int, default=2)
    p.add_argument("--train-fraction", type=float, default=0.1)
    p.add_argument("--repetitions", type=int, default=5)
    p.add_argument("--models", default="fate,feta,ranknet,err")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV path")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        status = args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return int(status or 0)


if __name__ == "__main__":
    sys.exit(main())
