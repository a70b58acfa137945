"""liftnet command line: train, eval, compare.

Each training run writes a self-describing directory:

    manifest.json   resolved configuration and relative artifact paths
    arch.cfg        copy of the architecture
    weights.bin     trained weights
    trace.csv       per-iteration trace (deterministic given the manifest)
    timing.csv      cumulative wall-clock seconds per iteration
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import arch as arch_mod
from .baseline import SgdConfig, train_sgd
from .bcd import TrainConfig, TrainingError, TrainTrace, hidden_nnz_fraction, nnz_fractions, train
from .data import Dataset, IdxFormatError, load_mnist_dir, make_synthetic, subset
from .inference import (WeightFileError, evaluate, extract_features, fit_linear_svm,
                        load_weights, save_weights, select_svm_reg)

log = logging.getLogger("liftnet")

MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


def parse_data_spec(text: str) -> dict:
    """'mnist:DIR[:train|test]' or 'synthetic:n=..,d=..,classes=..,seed=..[,part=..]'."""
    kind, _, rest = text.partition(":")
    if kind == "mnist":
        path, split = rest, "train"
        if rest.endswith(":test") or rest.endswith(":train"):
            path, _, split = rest.rpartition(":")
        if not path:
            raise UsageError("mnist data needs a directory: mnist:DIR")
        return {"kind": "mnist", "dir": path, "split": split}
    if kind == "synthetic":
        keys = {"n": int, "d": int, "classes": int, "seed": int, "part": int,
                "separation": float, "sigma": float}
        out = {"kind": "synthetic", "part": 0}
        for item in filter(None, rest.split(",")):
            k, eq, v = item.partition("=")
            if not eq or k not in keys:
                raise UsageError(f"bad synthetic parameter {item!r}")
            try:
                out[k] = keys[k](v)
            except ValueError:
                raise UsageError(f"bad value for {k}: {v!r}") from None
        missing = [k for k in ("n", "d", "classes", "seed") if k not in out]
        if missing:
            raise UsageError(f"synthetic data needs {', '.join(missing)}")
        return out
    raise UsageError(f"unknown data source {text!r} (expected mnist:DIR or synthetic:...)")


def load_data(desc: dict) -> Dataset:
    if desc["kind"] == "mnist":
        return load_mnist_dir(desc["dir"], desc["split"])
    extra = {k: desc[k] for k in ("separation", "sigma") if k in desc}
    return make_synthetic(desc["n"], desc["d"], desc["classes"], desc["seed"],
                          part=desc["part"], **extra)


def _load(text: str, n: int | None, seed: int) -> Dataset:
    ds = load_data(parse_data_spec(text))
    return subset(ds, n, seed) if n else ds


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# train

def cmd_train(args) -> int:
    spec = arch_mod.load_arch(args.arch)
    data = _load(args.data, args.subset, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    config = {"algo": args.algo, "epochs": args.epochs, "seed": args.seed,
              "init_scale": args.init_scale}
    if args.algo == "sgd":
        cfg = SgdConfig(lr=args.lr, momentum=args.momentum, batch_size=args.batch_size,
                        epochs=args.epochs, seed=args.seed, init_scale=args.init_scale)
        config.update(lr=args.lr, momentum=args.momentum, batch_size=args.batch_size)
        runner = lambda: train_sgd(data, spec, cfg)  # noqa: E731
    else:
        cfg = TrainConfig(gammas=args.gamma, schedule_power=args.p,
                          schedule_offset=args.schedule_offset, max_epochs=args.epochs,
                          seed=args.seed, sparse=args.algo == "bcd-s", radius=args.radius,
                          init_scale=args.init_scale, u_tol=args.tol, w_tol=args.tol,
                          max_iter=args.max_iter, weight_decay=args.weight_decay,
                          classifier_init_scale=args.classifier_init_scale)
        config.update(gamma=args.gamma, p=args.p, schedule_offset=args.schedule_offset,
                      tol=args.tol, max_iter=args.max_iter, weight_decay=args.weight_decay,
                      classifier_init_scale=args.classifier_init_scale)
        if args.algo == "bcd-s":
            config["radius"] = args.radius
        runner = lambda: train(data, spec, cfg)  # noqa: E731

    status = 0
    try:
        weights, trace = runner()
    except TrainingError as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        weights, trace, status = exc.weights, exc.trace or TrainTrace(), 1

    (out / "arch.cfg").write_text(arch_mod.format_arch(spec))
    trace.to_csv(out / "trace.csv")
    trace.timing_to_csv(out / "timing.csv")
    artifacts = {"arch": "arch.cfg", "trace": "trace.csv", "timing": "timing.csv"}
    if weights is not None and weights.is_finite():
        save_weights(out / "weights.bin", spec, weights)
        artifacts["weights"] = "weights.bin"
    manifest = {"config": config, "data": args.data, "subset": args.subset,
                "train_samples": data.n, "status": "ok" if status == 0 else "aborted",
                "artifacts": artifacts}
    _write_json(out / MANIFEST, manifest)
    if status == 0:
        final = trace.objective[-1] if len(trace) else trace.initial_objective
        print(f"{args.algo}: {len(trace)} iterations, final objective {final:.6g} -> {out}")
    return status


# ---------------------------------------------------------------------------
# eval

def cmd_eval(args) -> int:
    run = Path(args.run) if args.run else None
    manifest = None
    if run is not None:
        manifest = json.loads((run / MANIFEST).read_text())
        arts = manifest["artifacts"]
        if "weights" not in arts:
            raise UsageError(f"run {run} has no weights (status {manifest.get('status')})")
        args.weights = args.weights or str(run / arts["weights"])
        args.arch = args.arch or str(run / arts["arch"])
        args.train_data = args.train_data or manifest["data"]
        if args.train_subset is None:
            args.train_subset = manifest.get("subset")
        args.out = args.out or str(run)
    for flag in ("weights", "arch", "train_data", "test_data", "out"):
        if not getattr(args, flag):
            raise UsageError(f"--{flag.replace('_', '-')} is required (or give --run)")

    spec = arch_mod.load_arch(args.arch)
    try:
        header_spec, weights = load_weights(args.weights)
    except (WeightFileError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if header_spec != spec:
        print(f"error: weights in {args.weights} were saved for a different architecture "
              f"(dims {list(header_spec.dims)} vs {list(spec.dims)})", file=sys.stderr)
        return 1

    seed = args.subset_seed
    tr = _load(args.train_data, args.train_subset, seed)
    te = _load(args.test_data, args.test_subset, seed)
    if tr.dim != spec.dims[0] or te.dim != spec.dims[0]:
        print(f"error: data dimension does not match architecture input {spec.dims[0]}",
              file=sys.stderr)
        return 1

    Ftr = extract_features(spec, weights, tr.features)
    if args.svm_reg == "auto":
        reg, holdout = select_svm_reg(Ftr, tr.labels, seed=seed)
    else:
        reg, holdout = float(args.svm_reg), None
    clf = fit_linear_svm(Ftr, tr.labels, reg)
    train_err = float(np.mean(clf.predict(Ftr) != tr.labels))
    metrics = evaluate(spec, weights, clf, te)

    result = {"test_error": metrics.error, "train_error": train_err,
              "test_samples": metrics.n, "train_samples": tr.n,
              "feature_dim": spec.feature_dim, "svm_reg": reg,
              "per_class_accuracy": {str(k): v for k, v in metrics.per_class_accuracy().items()},
              "train_data": args.train_data, "test_data": args.test_data}
    if holdout is not None:
        result["svm_holdout_error"] = {repr(k): v for k, v in holdout.items()}
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "eval.json", result)
    if manifest is not None and out.resolve() == run.resolve():
        manifest["artifacts"]["eval"] = "eval.json"
        _write_json(run / MANIFEST, manifest)
    print(f"test error {metrics.error:.4f} ({metrics.n} samples, svm reg {reg:g})")
    return 0


# ---------------------------------------------------------------------------
# compare

def _run_summary(run: Path) -> dict:
    manifest = json.loads((run / MANIFEST).read_text())
    arts = manifest["artifacts"]
    spec = arch_mod.load_arch(run / arts["arch"])
    with open(run / arts["trace"], newline="") as fh:
        rows = list(csv.DictReader(fh))
    with open(run / arts["timing"], newline="") as fh:
        timing = list(csv.DictReader(fh))
    out = {"spec": spec, "algo": manifest["config"]["algo"],
           "final_objective": float(rows[-1]["objective"]) if rows else float("nan"),
           "wall_seconds": float(timing[-1]["seconds"]) if timing else 0.0,
           "test_error": float("nan")}
    if "eval" in arts:
        out["test_error"] = json.loads((run / arts["eval"]).read_text())["test_error"]
    if "weights" in arts:
        _, weights = load_weights(run / arts["weights"])
        out["hidden_nnz"] = hidden_nnz_fraction(weights)
        out.update({f"nnz_{k}": v for k, v in nnz_fractions(weights).items()})
    return out


def cmd_compare(args) -> int:
    if len(args.runs) < 2:
        print("error: compare needs at least two runs", file=sys.stderr)
        return 1
    runs = [Path(r) for r in args.runs]
    try:
        summaries = [_run_summary(r) for r in runs]
    except (OSError, KeyError, ValueError) as exc:
        print(f"error: cannot read run: {exc}", file=sys.stderr)
        return 1
    first = summaries[0]["spec"]
    for r, s in zip(runs, summaries):
        if s["spec"] != first:
            print(f"error: run {r} uses a different architecture than {runs[0]}", file=sys.stderr)
            return 1

    metrics = ["final_objective", "test_error", "wall_seconds", "hidden_nnz"]
    edge_rows = sorted({k for s in summaries for k in s if k.startswith("nnz_")},
                       key=lambda k: (k == "nnz_V", k))
    names = [f"{r.name}:{s['algo']}" for r, s in zip(runs, summaries)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric"] + names)
        for m in metrics + edge_rows:
            w.writerow([m] + [repr(float(s.get(m, float("nan")))) for s in summaries])
    print(f"wrote {out}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="liftnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log every iteration")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a network")
    t.add_argument("--algo", choices=["bcd", "bcd-s", "sgd"], required=True)
    t.add_argument("--arch", required=True, help="architecture config file")
    t.add_argument("--data", required=True, help="mnist:DIR[:test] or synthetic:n=..,d=..,classes=..,seed=..")
    t.add_argument("--epochs", type=int, default=100)
    t.add_argument("--gamma", type=float, default=0.1)
    t.add_argument("--p", type=float, default=2.0, help="schedule power (> 1)")
    t.add_argument("--schedule-offset", type=int, default=1,
                   help="theta_t = (t + offset)^-p; 0 gives theta_1 = 1")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--subset", type=int, default=None, help="stratified subset size")
    t.add_argument("--init-scale", type=float, default=0.01)
    t.add_argument("--classifier-init-scale", type=float, default=None,
                   help="init range for V (default: --init-scale)")
    t.add_argument("--radius", type=float, default=1.0, help="l1 radius for bcd-s rows")
    t.add_argument("--tol", type=float, default=1e-6, help="sub-solver tolerance")
    t.add_argument("--max-iter", type=int, default=2000, help="sub-solver iteration cap")
    t.add_argument("--weight-decay", type=float, default=0.0)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="retrain a linear SVM on features and report test error")
    e.add_argument("--run", help="training run directory; fills in weights, arch, train data")
    e.add_argument("--weights")
    e.add_argument("--arch")
    e.add_argument("--train-data")
    e.add_argument("--test-data", required=True)
    e.add_argument("--train-subset", type=int, default=None)
    e.add_argument("--test-subset", type=int, default=None)
    e.add_argument("--subset-seed", type=int, default=0)
    e.add_argument("--svm-reg", default="auto", help="float, or 'auto' to pick on a holdout")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="tabulate metrics across runs")
    c.add_argument("runs", nargs="*")
    c.add_argument("--out", required=True, help="output CSV")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "svm_reg", "auto") != "auto":
        try:
            float(args.svm_reg)
        except ValueError:
            parser.error(f"--svm-reg must be a number or 'auto', got {args.svm_reg!r}")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.error(str(exc))
    except (arch_mod.ArchitectureError, IdxFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
