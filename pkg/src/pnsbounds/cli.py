"""Command-line interface for the experiment harness.

Subcommands: generate, train, infer, evaluate, sweep, oracle-dump,
emit-plot-data.  ``evaluate`` drives the full replicate protocol for a
config; ``sweep`` fans it out over the configured n_exp grid.  Configs are
TOML files or bundled preset names (see ``pnsbounds presets``).  Exit code
is 0 on success; failures print a machine-readable JSON error record to
stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import experiment, scm_highdim, scm_lowdim
from .checkpoint import load_estimator, save_estimator
from .configs import ConfigError, available_presets, load_config


def _write_dataset_csv(path, dataset):
    d = dataset.covariates.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([f"z{i}" for i in range(d)] + ["x", "y"])
        for i in range(len(dataset)):
            writer.writerow(
                [repr(float(v)) for v in dataset.covariates[i]]
                + [str(int(dataset.treatment[i])), str(int(dataset.outcome[i]))]
            )


def _read_dataset_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    if header[-2:] != ["x", "y"]:
        raise ValueError(f"{path} is not a dataset file (expected trailing x,y columns)")
    data = np.array([[float(v) for v in row] for row in rows])
    return data[:, :-2], data[:, -2].astype(int), data[:, -1].astype(int)


def _read_covariates_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [[float(v) for v in row] for row in reader if row]
    return np.asarray(rows, dtype=float)


def cmd_generate(args):
    cfg = load_config(args.config)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    seeds = np.random.SeedSequence(cfg.experiment.seed + args.replicate).spawn(4)
    if cfg.data.dgp == "lowdim":
        scm = experiment.build_lowdim(cfg.data)
        obs = scm_lowdim.sample_dataset(scm, cfg.data.n_obs, "obs", seeds[0])
        exp = scm_lowdim.sample_dataset(scm, cfg.data.n_exp, "exp", seeds[1])
    else:
        scm, source = experiment.build_highdim(cfg.data)
        obs = scm_highdim.sample_highdim(scm, source, cfg.data.n_obs, "obs", seeds[0])
        exp = scm_highdim.sample_highdim(scm, source, cfg.data.n_exp, "exp", seeds[1])
    _write_dataset_csv(outdir / "obs.csv", obs)
    _write_dataset_csv(outdir / "exp.csv", exp)
    print(f"wrote {outdir / 'obs.csv'} ({len(obs)} rows) and "
          f"{outdir / 'exp.csv'} ({len(exp)} rows)")
    return 0


def cmd_train(args):
    cfg = load_config(args.config)
    datadir = Path(args.data)
    Z_obs, x_obs, y_obs = _read_dataset_csv(datadir / "obs.csv")
    Z_exp, x_exp, y_exp = _read_dataset_csv(datadir / "exp.csv")
    Z = np.vstack([Z_obs, Z_exp])
    x = np.concatenate([x_obs, x_exp])
    y = np.concatenate([y_obs, y_exp])
    regime = np.concatenate([np.zeros(len(x_obs), int), np.ones(len(x_exp), int)])
    est = experiment.make_estimator(args.method, cfg, seed=cfg.experiment.seed)
    est.fit(Z, x, y, regime)
    save_estimator(args.out, est)
    print(f"trained {args.method} on {len(x)} rows -> {args.out}")
    return 0


def cmd_infer(args):
    est = load_estimator(args.checkpoint)
    Z = _read_covariates_csv(args.covariates)
    if hasattr(est, "refit_influence"):
        if not args.data:
            raise ValueError(
                "multiplier-bootstrap checkpoints need --data to rebuild "
                "influence functions"
            )
        datadir = Path(args.data)
        Z_obs, x_obs, y_obs = _read_dataset_csv(datadir / "obs.csv")
        Z_exp, x_exp, y_exp = _read_dataset_csv(datadir / "exp.csv")
        est.refit_influence(
            np.vstack([Z_obs, Z_exp]),
            np.concatenate([x_obs, x_exp]),
            np.concatenate([y_obs, y_exp]),
            np.concatenate([np.zeros(len(x_obs), int), np.ones(len(x_exp), int)]),
        )
    from .bootstrap import MultiplierBootstrapBounds
    from .epinet import EpistemicBoundsEstimator

    if isinstance(est, (EpistemicBoundsEstimator, MultiplierBootstrapBounds)):
        intervals = est.predict_interval(Z, seed=args.seed)
    else:
        intervals = est.predict_interval(Z)
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["point", "lower", "upper", "crossed", "kappa_l",
                         "kappa_u", "method"])
        for i, iv in enumerate(intervals):
            writer.writerow([
                str(i), repr(iv.lower), repr(iv.upper), str(int(iv.crossed)),
                repr(iv.kappa_lower), repr(iv.kappa_upper), iv.method,
            ])
    print(f"wrote {len(intervals)} intervals -> {args.out}")
    return 0


def cmd_evaluate(args):
    cfg = load_config(args.config)
    if args.workers is not None:
        cfg = cfg.replace_experiment(workers=args.workers)
    aggregated = experiment.run_experiment(cfg, args.out)
    for method in sorted(aggregated["methods"]):
        stats = aggregated["methods"][method]
        print(
            f"{method:>16s}  valid={stats['pct_valid']:.4f}  "
            f"cov={stats['point_coverage']:.4f}  id={stats['id_set_coverage']:.4f}  "
            f"width={stats['mean_width']:.4f}  score={stats['interval_score']:.4f}"
        )
    print(f"aggregated -> {Path(args.out) / 'aggregated.json'}")
    return 0


def cmd_sweep(args):
    cfg = load_config(args.config)
    if args.workers is not None:
        cfg = cfg.replace_experiment(workers=args.workers)
    results = experiment.run_sweep(cfg, args.out)
    for agg in results:
        n_exp = agg["config"]["data"]["n_exp"]
        for method in sorted(agg["methods"]):
            stats = agg["methods"][method]
            print(
                f"n_exp={n_exp:>8d}  {method:>16s}  "
                f"width={stats['mean_width']:.4f}  id={stats['id_set_coverage']:.4f}"
            )
    return 0


def cmd_oracle_dump(args):
    cfg = load_config(args.config)
    z_rows = _read_covariates_csv(args.z_file) if args.z_file else None
    audit = experiment.oracle_dump(
        cfg, args.out, z_rows=z_rows, n_points=args.n, seed=args.seed
    )
    for key in sorted(audit):
        print(f"{key} = {audit[key]}")
    return 0


def cmd_emit_plot_data(args):
    rows = experiment.emit_plot_data(args.results, args.out)
    print(f"wrote {len(rows)} rows -> {args.out}")
    return 0


def cmd_presets(args):
    for name in available_presets():
        print(name)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pnsbounds",
        description="Finite-sample PNS bound estimation experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="sample datasets for a config")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--replicate", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one method on generated data")
    p.add_argument("--config", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--data", required=True, help="directory with obs.csv/exp.csv")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="predict intervals from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--covariates", required=True, help="headered numeric CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--data", default=None,
                   help="training data dir (multiplier bootstrap only)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="run the full replicate protocol")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("sweep", help="run the n_exp sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oracle-dump", help="dump exact oracle atoms/bounds/PNS")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--z-file", default=None)
    p.add_argument("--n", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_oracle_dump)

    p = sub.add_parser("emit-plot-data", help="flatten results to tidy CSV")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_emit_plot_data)

    p = sub.add_parser("presets", help="list bundled config presets")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        record = {"error": "config", "field": exc.field_path, "message": str(exc)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 2
    except Exception as exc:  # surface a machine-readable record, nonzero exit
        record = {"error": type(exc).__name__, "message": str(exc)}
        print(json.dumps(record, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
