"""Command-line interface.

Subcommands: ``gen-data``, ``supervised``, ``calibrate``, ``ssl``, ``eval``.
Every flag may also come from a JSON file given with ``--config``; keys are
the flag names without the leading dashes and explicit flags win.

Exit codes: 0 ok, 2 usage, 3 invalid config, 4 I/O, 5 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import dataclass

import numpy as np

from . import data_io
from .conformal import ConformalConfig, draw_u, empirical_coverage, mean_set_size, predict_sets
from .data_io import Dataset, RunMetrics
from .errors import ConformalSSLError, InvalidArgumentError, ParseError
from .model_core import TrainConfig, forward, softmax
from .pseudo_label import SelectionConfig
from .ssl_pipeline import SSLConfig, accuracy, fit_calibrator, labeled_folds, run, train_baseline

log = logging.getLogger("conformal_ssl")

EXIT_USAGE, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 2, 3, 4, 5


# -- parser ------------------------------------------------------------------


def _data_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--gen", choices=("blobs", "moons"), help="generate a synthetic dataset")
    g.add_argument("--data", help="CSV with columns f0..f{d-1},label[,split]")
    g.add_argument("--n", type=int, default=1000, help="generated sample count")
    g.add_argument("--classes", type=int, default=None, help="class count (blobs; CSV override)")
    g.add_argument("--features", type=int, default=2, help="feature dimension for blobs")
    g.add_argument("--cluster-std", type=float, default=1.0, help="blob standard deviation")
    g.add_argument("--noise", type=float, default=0.2, help="moons noise level")
    g.add_argument("--labeled-frac", type=float, default=0.1)
    g.add_argument("--test-frac", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=0, help="master seed for all randomness")
    g.add_argument("--config", help="JSON file of flag values (flags override it)")


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model and training")
    g.add_argument("--hidden", type=int, default=64)
    g.add_argument("--dropout", type=float, default=0.1)
    g.add_argument("--lr", type=float, default=0.1)
    g.add_argument("--epochs", type=int, default=300)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--calib-frac", type=float, default=0.2, help="labeled fraction held out for calibration")
    g.add_argument("--calibrate-on-dtilde", action="store_true",
                   help="calibrate on the training data itself (no held-out fold)")


def _conformal_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("prediction sets")
    g.add_argument("--alpha", type=float, default=0.1)
    g.add_argument("--lambda", dest="lam", type=float, default=0.1)
    g.add_argument("--k-reg", type=int, default=2)
    g.add_argument("--randomized", action="store_true")


def _selection_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("pseudo-label selection")
    g.add_argument("--tau-p", type=float, default=0.7)
    g.add_argument("--tau-n", type=float, default=0.05)
    g.add_argument("--kappa-p", type=float, default=0.05)
    g.add_argument("--kappa-n", type=float, default=0.005)
    g.add_argument("--gamma", type=float, default=0.5)
    g.add_argument("--label-mode", choices=("single", "multi"), default="single")
    g.add_argument("--mc-passes", type=int, default=10)
    g.add_argument("--uncertainty-raw", action="store_true",
                   help="MC-dropout statistics on untempered softmax")
    g.add_argument("--max-iters", type=int, default=10)
    g.add_argument("--tol", type=float, default=0.01)
    g.add_argument("--threads", type=int, default=os.cpu_count() or 1)


def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(prog="conformal-ssl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("gen-data", help="write a synthetic dataset to CSV")
    _data_flags(p)
    p.add_argument("--with-split", action="store_true", help="add a split column (labeled/unlabeled/test)")
    p.add_argument("--out", required=True)
    subs["gen-data"] = p

    p = sub.add_parser("supervised", help="train on labeled data only")
    _data_flags(p)
    _model_flags(p)
    p.add_argument("--out", help="metrics JSON")
    p.add_argument("--model-out", help="save weights (.npz)")
    subs["supervised"] = p

    p = sub.add_parser("calibrate", help="fit temperature and RAPS threshold, audit coverage")
    _data_flags(p)
    _model_flags(p)
    _conformal_flags(p)
    p.add_argument("--model", help="calibrate a saved model instead of training one")
    p.add_argument("--out", help="coverage audit JSON")
    p.add_argument("--model-out", help="save weights plus calibration (.npz)")
    subs["calibrate"] = p

    p = sub.add_parser("ssl", help="self-training with prediction-set pseudo-labels")
    _data_flags(p)
    _model_flags(p)
    _conformal_flags(p)
    _selection_flags(p)
    p.add_argument("--out", help="metrics JSON")
    p.add_argument("--sets-out", help="final-round prediction sets CSV")
    p.add_argument("--model-out", help="save final weights plus calibration (.npz)")
    subs["ssl"] = p

    p = sub.add_parser("eval", help="accuracy and coverage of a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="test CSV (rows tagged test, else all labeled rows)")
    p.add_argument("--classes", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="evaluation JSON")
    p.add_argument("--config")
    subs["eval"] = p
    return parser, subs


def _apply_config_file(sub: argparse.ArgumentParser, path: str) -> None:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise ParseError(f"{path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise InvalidArgumentError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise InvalidArgumentError(f"{path}: config must be a JSON object")
    by_flag = {}
    for action in sub._actions:
        for opt in action.option_strings:
            if opt.startswith("--"):
                by_flag[opt[2:]] = action
    defaults = {}
    for key, value in raw.items():
        action = by_flag.get(key.replace("_", "-"))
        if action is None or action.dest in ("config", "help"):
            raise InvalidArgumentError(f"{path}: unknown config key {key!r}")
        if action.type is not None and value is not None and not isinstance(value, bool):
            try:
                value = action.type(value)
            except (TypeError, ValueError) as exc:
                raise InvalidArgumentError(f"{path}: bad value for {key!r}: {value!r}") from exc
        if action.choices is not None and value not in action.choices:
            raise InvalidArgumentError(f"{path}: {key!r} must be one of {list(action.choices)}")
        defaults[action.dest] = value
    sub.set_defaults(**defaults)


# -- config assembly ---------------------------------------------------------


def ssl_config(args) -> SSLConfig:
    conformal = ConformalConfig(
        alpha=getattr(args, "alpha", 0.1),
        lam=getattr(args, "lam", 0.1),
        k_reg=getattr(args, "k_reg", 2),
        randomized=getattr(args, "randomized", False),
        seed=args.seed,
    )
    selection = SelectionConfig(
        kappa_p=getattr(args, "kappa_p", 0.05),
        kappa_n=getattr(args, "kappa_n", 0.005),
        tau_p=getattr(args, "tau_p", 0.7),
        tau_n=getattr(args, "tau_n", 0.05),
        gamma=getattr(args, "gamma", 0.5),
        mc_passes=getattr(args, "mc_passes", 10),
        label_mode=getattr(args, "label_mode", "single"),
    )
    return SSLConfig(
        conformal=conformal,
        selection=selection,
        train=TrainConfig(lr=args.lr, epochs=args.epochs, batch_size=args.batch_size, seed=args.seed),
        hidden_dim=args.hidden,
        dropout_rate=args.dropout,
        max_iterations=getattr(args, "max_iters", 10),
        convergence_tol=getattr(args, "tol", 0.01),
        calib_fraction=args.calib_frac,
        seed=args.seed,
        calibrate_on_dtilde=args.calibrate_on_dtilde,
        uncertainty_raw=getattr(args, "uncertainty_raw", False),
        threads=max(1, getattr(args, "threads", 1)),
    )


def data_config(args) -> dict:
    return {
        "gen": args.gen,
        "data": args.data,
        "n": args.n,
        "classes": args.classes,
        "features": args.features,
        "cluster_std": args.cluster_std,
        "noise": args.noise,
        "labeled_frac": args.labeled_frac,
        "test_frac": args.test_frac,
    }


@dataclass
class Prepared:
    labeled: Dataset
    unlabeled: Dataset
    test: Dataset | None
    truth: np.ndarray | None
    unlabeled_ids: np.ndarray


def generate(args) -> Dataset:
    if args.seed < 0:
        raise InvalidArgumentError("--seed must be non-negative")
    if args.gen == "moons":
        return data_io.gen_moons(args.n, args.noise, args.seed)
    return data_io.gen_blobs(args.n, args.classes or 3, args.features, args.cluster_std, args.seed)


def _fractions(args) -> tuple[float, float, float]:
    lab, test = args.labeled_frac, args.test_frac
    if not (0 < lab <= 1 and 0 <= test < 1 and lab + test <= 1 + 1e-12):
        raise InvalidArgumentError("need 0 < --labeled-frac, 0 <= --test-frac, and their sum <= 1")
    return lab, max(0.0, 1.0 - lab - test), test


def prepare(args) -> Prepared:
    """Resolve ``--gen`` / ``--data`` into labeled, unlabeled and test parts."""
    if (args.gen is None) == (args.data is None):
        raise InvalidArgumentError("give exactly one of --gen or --data")
    if args.gen is not None:
        work, ledger = data_io.split(generate(args), _fractions(args), args.seed)
    else:
        ds = data_io.load_csv(args.data, args.classes)
        if ds.split_tags is None:
            known = np.flatnonzero(ds.labels >= 0)
            extra = np.flatnonzero(ds.labels < 0)
            part, ledger = data_io.split(ds.subset(known), _fractions(args), args.seed)
            tags = np.empty(len(ds), dtype=object)
            tags[known] = part.split_tags
            tags[extra] = "unlabeled"
            labels = ds.labels.copy()
            labels[known] = part.labels
            work = Dataset(ds.features, labels, ds.n_classes, tags)
            ledger = data_io.TruthLedger(known[ledger.row_index], ledger.labels)
            if extra.size:
                ledger = None  # truth incomplete for the pool
        else:
            tags = np.where(ds.split_tags == "calib", "train", ds.split_tags).astype(object)
            unl = np.flatnonzero(tags == "unlabeled")
            labels = ds.labels.copy()
            ledger = data_io.TruthLedger(unl, labels[unl].copy()) if np.all(labels[unl] >= 0) else None
            labels[unl] = data_io.UNLABELED
            work = Dataset(ds.features, labels, ds.n_classes, tags)
    unl_ids = np.flatnonzero(work.split_tags == "unlabeled")
    test = work.tagged("test")
    truth = None
    if ledger is not None:
        lookup = dict(zip(ledger.row_index.tolist(), ledger.labels.tolist()))
        truth = np.array([lookup[i] for i in unl_ids], dtype=np.int64)
    return Prepared(work.tagged("train"), work.tagged("unlabeled"), test if len(test) else None, truth, unl_ids)


# -- commands ----------------------------------------------------------------


def _write_json(obj: dict, path) -> None:
    try:
        with open(path, "w") as fh:
            json.dump(obj, fh, indent=2)
            fh.write("\n")
    except OSError as exc:
        raise ParseError(f"{path}: cannot write ({exc.strerror})") from exc


def cmd_gen_data(args) -> int:
    if args.gen is None:
        raise InvalidArgumentError("gen-data needs --gen")
    ds = generate(args)
    if args.with_split:
        work, ledger = data_io.split(ds, _fractions(args), args.seed)
        # the CSV keeps true labels; loaders mask rows tagged unlabeled
        labels = work.labels.copy()
        labels[ledger.row_index] = ledger.labels
        ds = Dataset(work.features, labels, work.n_classes, work.split_tags)
    data_io.write_csv(ds, args.out)
    print(f"wrote {len(ds)} rows, {ds.n_features} features, {ds.n_classes} classes to {args.out}")
    return 0


def cmd_supervised(args) -> int:
    t0 = time.perf_counter()
    prep = prepare(args)
    cfg = ssl_config(args)
    params = train_baseline(prep.labeled, cfg)
    acc = accuracy(params, prep.test)
    print(f"test_acc={acc:.4f}")
    if args.model_out:
        data_io.save_model(args.model_out, params)
    if args.out:
        config = {"command": "supervised", "data": data_config(args), "ssl": cfg.to_dict()}
        data_io.write_metrics(RunMetrics(config, [], acc, round(time.perf_counter() - t0, 3)), args.out)
    return 0


def cmd_calibrate(args) -> int:
    prep = prepare(args)
    cfg = ssl_config(args)
    tr, cal_idx = labeled_folds(cfg, prep.labeled.labels, 0)
    if args.model:
        params, _ = data_io.load_model(args.model)
    else:
        params = train_baseline(prep.labeled, cfg)
    X_cal = prep.labeled.features[cal_idx]
    y_cal = prep.labeled.labels[cal_idx]
    cal = fit_calibrator(params, X_cal, y_cal, cfg.conformal)
    print(f"temperature={cal.temperature:.6g} tau_hat={cal.tau_hat:.6g} n_calib={cal.n_calib}")

    audit = {
        "temperature": cal.temperature,
        "tau_hat": cal.tau_hat,
        "n_calib": cal.n_calib,
        "alpha": cfg.conformal.alpha,
        "lambda": cfg.conformal.lam,
        "k_reg": cfg.conformal.k_reg,
        "randomized": cfg.conformal.randomized,
        "calib_coverage": None,
        "test_coverage": None,
        "test_mean_set_size": None,
        "test_acc": accuracy(params, prep.test),
    }
    sets = predict_sets(softmax(forward(params, X_cal), cal.temperature), cal, draw_u(cal, len(y_cal)))
    audit["calib_coverage"] = empirical_coverage(sets, y_cal)
    if prep.test is not None:
        probs = softmax(forward(params, prep.test.features), cal.temperature)
        sets = predict_sets(probs, cal, draw_u(cal, len(prep.test), offset=len(y_cal)))
        audit["test_coverage"] = empirical_coverage(sets, prep.test.labels)
        audit["test_mean_set_size"] = mean_set_size(sets)
        print(f"test_coverage={audit['test_coverage']:.4f} mean_set_size={audit['test_mean_set_size']:.3f}")
    if args.out:
        _write_json(audit, args.out)
    if args.model_out:
        data_io.save_model(args.model_out, params, cal)
    return 0


def cmd_ssl(args) -> int:
    t0 = time.perf_counter()
    prep = prepare(args)
    cfg = ssl_config(args)
    result = run(prep.labeled, prep.unlabeled, cfg, test=prep.test, truth=prep.truth)
    final = result.reports[-1].test_acc
    for r in result.reports:
        print(
            f"iter={r.iter} n_pos={r.n_pos} n_neg={r.n_neg} mean_set_size={r.mean_set_size:.3f} "
            f"coverage={r.coverage:.3f} test_acc={r.test_acc:.4f}"
        )
    if args.out:
        config = {"command": "ssl", "data": data_config(args), "ssl": cfg.to_dict()}
        metrics = RunMetrics(config, result.reports, final, round(time.perf_counter() - t0, 3))
        data_io.write_metrics(metrics, args.out)
    if args.sets_out:
        rnd = result.last_round
        rows = (
            (int(prep.unlabeled_ids[i]), rnd.sets[i], rnd.records[i].y_tilde, rnd.records[i].g)
            for i in range(len(rnd.records))
        )
        data_io.write_sets(rows, args.sets_out)
    if args.model_out:
        data_io.save_model(args.model_out, result.params, result.calibrator)
    return 0


def cmd_eval(args) -> int:
    params, cal = data_io.load_model(args.model)
    ds = data_io.load_csv(args.data, args.classes)
    if ds.split_tags is not None and np.any(ds.split_tags == "test"):
        ds = ds.tagged("test")
    ds = ds.subset(np.flatnonzero(ds.labels >= 0))
    if len(ds) == 0:
        raise InvalidArgumentError(f"{args.data}: no labeled rows to evaluate")
    if ds.n_features != params.n_features:
        raise InvalidArgumentError(
            f"model expects {params.n_features} features, data has {ds.n_features}"
        )
    report = {"n": len(ds), "test_acc": accuracy(params, ds), "coverage": None, "mean_set_size": None}
    if cal is not None:
        probs = softmax(forward(params, ds.features), cal.temperature)
        sets = predict_sets(probs, cal, draw_u(cal, len(ds)))
        report["coverage"] = empirical_coverage(sets, ds.labels)
        report["mean_set_size"] = mean_set_size(sets)
    print(" ".join(f"{k}={v}" for k, v in report.items()))
    if args.out:
        _write_json(report, args.out)
    return 0


COMMANDS = {
    "gen-data": cmd_gen_data,
    "supervised": cmd_supervised,
    "calibrate": cmd_calibrate,
    "ssl": cmd_ssl,
    "eval": cmd_eval,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser, subs = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if getattr(args, "config", None):
            _apply_config_file(subs[args.command], args.config)
            args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except ConformalSSLError as exc:
        print(f"error[{exc.kind}] code={exc.exit_code}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error[io] code={EXIT_IO}: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"error[numeric] code={EXIT_NUMERIC}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
