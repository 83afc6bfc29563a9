"""Command-line entry point.

Results go to stdout (JSON) or to files under ``--out``; logs go to stderr.
Set ``NTKMOE_LOG_LEVEL`` (e.g. ``DEBUG``) to change log verbosity.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import io as snapshot_io
from .calibration import fit_lambda0, predict_proba
from .datasets import gen_cluster_classification, gen_teacher_regression, gen_toy1d_gap
from .metrics import nll_regression, rmse
from .nn import MlpSpec, TrainConfig, init_mlp, train_map, train_rmse
from .pipeline import MoeConfig, PipelineError, fit_moe, predict_moe_batch, with_lambda0

log = logging.getLogger("ntkmoe")

KINDS = ("toy1d", "teacher", "classification")
METRICS = ("nll", "rmse", "mean_variance", "accuracy")


class StageError(RuntimeError):
    def __init__(self, stage, exc):
        super().__init__(f"{stage} failed: {exc}")
        self.stage = stage


def _float_pair(text):
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'a,b', got {text!r}") from None
    return a, b


def _int_list(text):
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated ints, got {text!r}") from None
    if not vals or any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError("widths must be positive")
    return vals


def _metric_list(text):
    names = [m.strip() for m in text.split(",") if m.strip()]
    bad = [m for m in names if m not in METRICS]
    if bad or not names:
        raise argparse.ArgumentTypeError(
            f"unknown metric(s) {bad}; choose from {', '.join(METRICS)}")
    return names


def _emit(obj):
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def _write_rows(path, rows):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def cmd_gen_data(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "toy1d":
        noise = 0.2 if args.noise is None else args.noise
        sets = dict(zip(("train", "test"),
                        gen_toy1d_gap(args.n, args.seed, noise, args.gap)))
    elif args.kind == "teacher":
        noise = 0.1 if args.noise is None else args.noise
        teacher_seed = 10_000 + args.seed
        sets = {"train": gen_teacher_regression(args.dim, args.outputs, args.n,
                                                noise=noise, seed=args.seed,
                                                teacher_seed=teacher_seed),
                "test": gen_teacher_regression(args.dim, args.outputs, args.n,
                                               noise=noise, seed=args.seed + 5_000,
                                               teacher_seed=teacher_seed)}
    else:
        sets = dict(zip(("train", "test", "ood"),
                        gen_cluster_classification(args.classes, args.n, args.separation,
                                                   seed=args.seed)))
    written = {}
    for name, data in sets.items():
        path = out / f"{name}.csv"
        snapshot_io.save_csv(data, path)
        written[name] = str(path)
    _emit({"kind": args.kind, "files": written})


def cmd_train_dnn(args):
    data = snapshot_io.load_csv(args.data)
    spec = MlpSpec((data.X.shape[1], *args.hidden, data.Y.shape[1]), args.activation)
    cfg = TrainConfig(args.loss, args.delta, args.lr, args.epochs, args.batch, args.seed)
    mlp, history = train_map(init_mlp(spec, args.seed), data, cfg, return_history=True)
    report = {"final_objective": history[-1], "epochs": cfg.epochs}
    if cfg.loss == "mse":
        report["train_rmse"] = train_rmse(mlp, data)
    Path(args.out).write_bytes(snapshot_io.encode_mlp(mlp, asdict(cfg), report))
    _emit(report)


def cmd_fit_moe(args):
    try:
        mlp, train_config = snapshot_io.decode_mlp(Path(args.dnn).read_bytes())
    except snapshot_io.SnapshotError as exc:
        raise StageError("load network", exc) from exc
    data = snapshot_io.load_csv(args.data)
    cfg = MoeConfig(n_experts=args.experts, pca_subset=args.pca_subset,
                    pca_dims=args.pca_dims, n_neighbors=args.neighbors,
                    boundary_fraction=args.boundary_frac,
                    boundary_budget=None if args.boundary_budget < 0 else args.boundary_budget,
                    prune_global=args.prune_global, prune_expert=args.prune_expert,
                    mll_iterations=args.mll_iters, patch_enabled=not args.no_patch,
                    partition_mode=args.partition, seed=args.seed)
    model = fit_moe(mlp, data, cfg, workers=args.workers, train_config=train_config)
    if args.calibrate_on:
        val = snapshot_io.load_csv(args.calibrate_on)
        model = with_lambda0(model, fit_lambda0(model, val).lambda0)
    snapshot_io.snapshot_write(model, args.out)
    meta = model.metadata
    _emit({"expert_sizes": meta["expert_sizes"], "jitters": meta["jitters"],
           "timings": meta["timings"], "workers": meta["workers"],
           "lambda0": model.lambda0})


def cmd_eval(args):
    model = snapshot_io.snapshot_read(args.model)
    data = snapshot_io.load_csv(args.data)
    d = predict_moe_batch(model, data.X)
    report = {}
    for name in args.metrics:
        if name == "nll":
            if model.loss != "mse":
                raise StageError("eval", "nll is defined for regression models here")
            report["nll"] = nll_regression(d.mean, d.variance, data.Y)
        elif name == "rmse":
            report["rmse"] = rmse(d.mean, data.Y)
        elif name == "mean_variance":
            report["mean_variance"] = float(d.variance.mean())
        elif name == "accuracy":
            p = predict_proba(model, data.X)
            report["accuracy"] = float(np.mean(p.argmax(1) == data.Y.argmax(1)))
    report["clamped"] = d.clamped
    if args.out:
        _write_rows(args.out, [report])
    _emit(report)


def cmd_experiment(args):
    from .experiments import EXPERIMENTS

    result = EXPERIMENTS[args.name](seeds=range(args.seeds))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / "rows.csv", result.rows)
    _write_rows(out / "aggregate.csv",
                [{"field": k, **v} for k, v in result.aggregate.items()])
    for name, table in result.tables.items():
        _write_rows(out / f"{name}.csv", table)
    summary = result.summary()
    (out / "summary.json").write_text(
        json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n")
    _emit(summary)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ntkmoe", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write synthetic train/test CSVs")
    g.add_argument("--kind", choices=KINDS, required=True)
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, default=None)
    g.add_argument("--gap", type=_float_pair, default=(2.0, 4.0))
    g.add_argument("--dim", type=int, default=10, help="teacher input dimension")
    g.add_argument("--outputs", type=int, default=1, help="teacher output dimension")
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--separation", type=float, default=4.0)
    g.add_argument("--out", required=True, help="output directory")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-dnn", help="train the network and snapshot it")
    t.add_argument("--data", required=True)
    t.add_argument("--hidden", type=_int_list, default=(200,))
    t.add_argument("--activation", choices=("tanh", "relu"), default="tanh")
    t.add_argument("--loss", choices=("mse", "cross_entropy"), default="mse")
    t.add_argument("--delta", type=float, default=1e-3)
    t.add_argument("--lr", type=float, default=0.05)
    t.add_argument("--epochs", type=int, default=2000)
    t.add_argument("--batch", type=int, default=10)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train_dnn)

    f = sub.add_parser("fit-moe", help="build the expert mixture around a network")
    f.add_argument("--dnn", required=True)
    f.add_argument("--data", required=True)
    f.add_argument("--experts", type=int, default=8)
    f.add_argument("--pca-subset", type=int, default=256)
    f.add_argument("--pca-dims", type=int, default=8)
    f.add_argument("--neighbors", type=int, default=2)
    f.add_argument("--boundary-frac", type=float, default=0.5)
    f.add_argument("--boundary-budget", type=int, default=16,
                   help="points per neighbour; negative takes every candidate")
    f.add_argument("--prune-global", type=float, default=1.0)
    f.add_argument("--prune-expert", type=float, default=1.0)
    f.add_argument("--mll-iters", type=int, default=100)
    f.add_argument("--no-patch", action="store_true")
    f.add_argument("--partition", choices=("shared", "per_output"), default="shared")
    f.add_argument("--workers", type=int, default=1)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--calibrate-on", default=None,
                   help="validation CSV for fitting the classification temperature")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit_moe)

    e = sub.add_parser("eval", help="score a model on a CSV")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--metrics", type=_metric_list, default=["nll", "rmse"])
    e.add_argument("--out", default=None, help="optional CSV for the report row")
    e.set_defaults(func=cmd_eval)

    from .experiments import EXPERIMENTS

    x = sub.add_parser("experiment", help="run a full experiment recipe")
    x.add_argument("name", choices=sorted(EXPERIMENTS))
    x.add_argument("--seeds", type=int, default=5)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv=None) -> int:
    logging.basicConfig(stream=sys.stderr,
                        level=os.environ.get("NTKMOE_LOG_LEVEL", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "seeds", 1) < 1:
        parser.error("--seeds must be >= 1")
    try:
        args.func(args)
    except StageError as exc:
        log.error("%s", exc)
        return 1
    except PipelineError as exc:
        log.error("fit-moe failed: %s", exc)
        return 1
    except (ValueError, OSError, RuntimeError) as exc:
        log.error("%s failed: %s", args.command, exc)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
