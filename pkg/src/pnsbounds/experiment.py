"""Config-driven experiment harness: generate, fit, infer, evaluate, aggregate.

A run is a directory of outputs fully determined by the config and its
master seed: per-replicate metric CSV shards, optional per-point interval
dumps, and one aggregated JSON with replicate means and Monte Carlo
confidence intervals.  Replicate seeds are ``master_seed + replicate_index``
and each shard is written atomically, so interrupted runs resume by
replicate and a rerun is byte-identical to an uninterrupted one.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import bounds, metrics, scm_highdim, scm_lowdim
from .anchored import AnchoredBoundsEstimator
from .baselines import SLearnerBounds, TLearnerBounds
from .bootstrap import MultiplierBootstrapBounds
from .configs import ExperimentConfig
from .epinet import EpistemicBoundsEstimator

METRIC_COLUMNS = (
    "replicate", "method", "n_obs", "n_exp", "n_test", "seed",
    "pct_valid", "point_coverage", "id_set_coverage", "mean_width",
    "interval_score", "crossed_rate",
)

POINT_COLUMNS = (
    "replicate", "method", "point", "lower", "upper", "crossed",
    "kappa_l", "kappa_u", "plug_lower", "plug_upper", "feasible",
    "oracle_pns", "oracle_lower", "oracle_upper",
)


def build_lowdim(data_cfg) -> scm_lowdim.LowDimScm:
    return scm_lowdim.from_preset(data_cfg.preset)


def build_highdim(data_cfg):
    if data_cfg.covariates == "synthetic":
        source = scm_highdim.synthetic_covariates(
            data_cfg.covariate_rows, data_cfg.d_obs, seed=data_cfg.scm_seed
        )
    else:
        source = scm_highdim.load_covariates_csv(data_cfg.covariates)
    scm = scm_highdim.random_highdim_scm(
        d_obs=source.d_obs,
        k=data_cfg.k_latent,
        gamma=data_cfg.gamma,
        eps_clip=data_cfg.eps_clip,
        seed=data_cfg.scm_seed,
    )
    return scm, source


def make_estimator(method: str, cfg: ExperimentConfig, seed: int):
    t = cfg.train
    if method == "anchored":
        return AnchoredBoundsEstimator(
            hidden_width=t.hidden_width, depth=t.depth,
            learning_rate=t.learning_rate, batch_size=t.batch_size,
            epochs=t.epochs, validation_fraction=t.validation_fraction,
            standardize=t.standardize, seed=seed,
        )
    if method == "s_learner":
        return SLearnerBounds(
            hidden_width=t.hidden_width, depth=t.depth,
            learning_rate=t.learning_rate, batch_size=t.batch_size,
            epochs=t.epochs, standardize=t.standardize, seed=seed,
        )
    if method == "t_learner":
        return TLearnerBounds(
            hidden_width=t.hidden_width, depth=t.depth,
            learning_rate=t.learning_rate, batch_size=t.batch_size,
            epochs=t.epochs, standardize=t.standardize, seed=seed,
        )
    if method == "enn_clr":
        e = cfg.enn
        return EpistemicBoundsEstimator(
            hidden_width=t.hidden_width, depth=t.depth,
            learning_rate=e.learning_rate, batch_size=e.batch_size,
            epochs=e.epochs, validation_fraction=t.validation_fraction,
            standardize=t.standardize, seed=seed,
            index_dim=e.index_dim, generator_hidden=e.generator_hidden,
            prior_hidden=e.prior_hidden, prior_scale=e.prior_scale,
            index_samples=e.index_samples, posterior_samples=e.posterior_samples,
            quantile_level=e.quantile_level,
        )
    if method in ("mb_last_layer", "mb_full_network"):
        b = cfg.bootstrap
        return MultiplierBootstrapBounds(
            mode="last_layer" if method == "mb_last_layer" else "full_network",
            n_bootstrap=b.replicates, alpha=b.alpha, cg_iters=b.cg_iters,
            damping=b.damping, hidden_width=b.hidden_width, depth=t.depth,
            learning_rate=b.learning_rate, batch_size=b.batch_size,
            epochs=b.epochs, validation_fraction=b.validation_fraction,
            standardize=t.standardize, seed=seed,
        )
    raise ValueError(f"unknown method {method!r}")


def method_detail(est, Z_test, infer_seed) -> dict:
    """Uniform per-point arrays for any fitted estimator.

    Keys: lower/upper/crossed, kappa_l/kappa_u, plug_lower/plug_upper (the
    plug-in-of-means interval; equal to the interval itself for uncorrected
    methods), feasible (atom audit at the learned-model tolerance).
    """
    if hasattr(est, "predict_detail"):
        detail = est.predict_detail(Z_test, seed=infer_seed)
        detail["feasible"] = bounds.check_feasibility(
            detail["mean_atoms"], bounds.AUDIT_FEASIBILITY_TOL
        )
        return detail
    atoms = est.predict_atoms(Z_test)
    lower, upper, crossed = bounds.plug_in_envelope(atoms)
    return {
        "lower": lower, "upper": upper, "crossed": crossed,
        "kappa_l": np.zeros_like(lower), "kappa_u": np.zeros_like(lower),
        "plug_lower": lower, "plug_upper": upper, "plug_crossed": crossed,
        "feasible": bounds.check_feasibility(atoms, bounds.AUDIT_FEASIBILITY_TOL),
    }


def replicate_data(cfg: ExperimentConfig, rep_index: int, exp_draw_size=None):
    """Deterministic datasets, test points and oracle arrays for a replicate.

    ``exp_draw_size`` draws that many experimental rows and keeps the first
    n_exp, so sweeps over n_exp share nested experimental samples within a
    replicate (common random numbers).
    """
    data_cfg = cfg.data
    rep_seed = cfg.experiment.seed + rep_index
    seeds = np.random.SeedSequence(rep_seed).spawn(4)
    obs_seed, exp_seed, test_seed, infer_seed = seeds
    draw = exp_draw_size or data_cfg.n_exp
    if data_cfg.dgp == "lowdim":
        scm = build_lowdim(data_cfg)
        obs = scm_lowdim.sample_dataset(scm, data_cfg.n_obs, "obs", obs_seed)
        exp = scm_lowdim.sample_dataset(scm, draw, "exp", exp_seed)
        Z_test = scm_lowdim.sample_covariates(scm, data_cfg.n_test, test_seed)
        olo, ohi, opns = scm_lowdim.oracle_intervals(scm, Z_test)
    else:
        scm, source = build_highdim(data_cfg)
        obs = scm_highdim.sample_highdim(scm, source, data_cfg.n_obs, "obs", obs_seed)
        exp = scm_highdim.sample_highdim(scm, source, draw, "exp", exp_seed)
        rng = np.random.default_rng(test_seed)
        Z_test = source.rows[rng.integers(0, source.rows.shape[0], data_cfg.n_test)]
        olo, ohi, opns = scm_highdim.oracle_intervals(scm, Z_test)
    n_exp = data_cfg.n_exp
    Z = np.vstack([obs.covariates, exp.covariates[:n_exp]])
    x = np.concatenate([obs.treatment, exp.treatment[:n_exp]])
    y = np.concatenate([obs.outcome, exp.outcome[:n_exp]])
    regime = np.concatenate([np.zeros(len(obs), dtype=int), np.ones(n_exp, dtype=int)])
    infer_seed_int = int(infer_seed.generate_state(1)[0])
    return Z, x, y, regime, Z_test, (olo, ohi, opns), rep_seed, infer_seed_int


def run_replicate(cfg: ExperimentConfig, rep_index: int, exp_draw_size=None):
    """Fit every configured method on one replicate and evaluate it."""
    Z, x, y, regime, Z_test, oracle, rep_seed, infer_seed = replicate_data(
        cfg, rep_index, exp_draw_size
    )
    olo, ohi, opns = oracle
    metric_rows, point_rows = [], []
    for method in cfg.experiment.methods:
        est = make_estimator(method, cfg, seed=rep_seed)
        est.fit(Z, x, y, regime)
        detail = method_detail(est, Z_test, infer_seed)
        report = metrics.evaluate_arrays(
            detail["lower"], detail["upper"], detail["crossed"],
            opns, olo, ohi, detail["feasible"],
        )
        row = {
            "replicate": rep_index, "method": method,
            "n_obs": cfg.data.n_obs, "n_exp": cfg.data.n_exp,
            "n_test": cfg.data.n_test, "seed": rep_seed,
        }
        row.update({name: getattr(report, name) for name in metrics.METRIC_FIELDS})
        metric_rows.append(row)
        if cfg.experiment.dump_points:
            for i in range(len(opns)):
                point_rows.append({
                    "replicate": rep_index, "method": method, "point": i,
                    "lower": detail["lower"][i], "upper": detail["upper"][i],
                    "crossed": int(detail["crossed"][i]),
                    "kappa_l": detail["kappa_l"][i], "kappa_u": detail["kappa_u"][i],
                    "plug_lower": detail["plug_lower"][i],
                    "plug_upper": detail["plug_upper"][i],
                    "feasible": int(detail["feasible"][i]),
                    "oracle_pns": opns[i], "oracle_lower": olo[i],
                    "oracle_upper": ohi[i],
                })
    return metric_rows, point_rows


def _format_value(value):
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _write_csv_atomic(path: Path, columns, rows):
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_format_value(row[c]) for c in columns])
    os.replace(tmp, path)


def _read_csv(path: Path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _shard_paths(outdir: Path, rep_index: int):
    return (
        outdir / "replicates" / f"rep_{rep_index:04d}.csv",
        outdir / "points" / f"rep_{rep_index:04d}.csv",
    )


def _shard_complete(cfg: ExperimentConfig, outdir: Path, rep_index: int) -> bool:
    metric_path, point_path = _shard_paths(outdir, rep_index)
    if not metric_path.exists():
        return False
    if cfg.experiment.dump_points and not point_path.exists():
        return False
    rows = _read_csv(metric_path)
    return sorted(r["method"] for r in rows) == sorted(cfg.experiment.methods)


def _run_shard(cfg: ExperimentConfig, outdir: str, rep_index: int, exp_draw_size):
    outdir = Path(outdir)
    metric_rows, point_rows = run_replicate(cfg, rep_index, exp_draw_size)
    metric_path, point_path = _shard_paths(outdir, rep_index)
    if cfg.experiment.dump_points:
        _write_csv_atomic(point_path, POINT_COLUMNS, point_rows)
    _write_csv_atomic(metric_path, METRIC_COLUMNS, metric_rows)
    return rep_index


def aggregate_results(cfg: ExperimentConfig, outdir: Path) -> dict:
    """Reduce replicate shards into the aggregated report dictionary."""
    per_method = {m: [] for m in cfg.experiment.methods}
    for rep in range(cfg.experiment.replicates):
        metric_path, _ = _shard_paths(outdir, rep)
        for row in _read_csv(metric_path):
            report = metrics.MetricsReport(
                pct_valid=float(row["pct_valid"]),
                point_coverage=float(row["point_coverage"]),
                id_set_coverage=float(row["id_set_coverage"]),
                mean_width=float(row["mean_width"]),
                interval_score=float(row["interval_score"]),
                crossed_rate=float(row["crossed_rate"]),
                n_test=int(row["n_test"]),
            )
            per_method[row["method"]].append(report)
    methods_out = {}
    for method, reports in per_method.items():
        if len(reports) >= 2:
            methods_out[method] = metrics.aggregate_replicates(reports).as_dict()
        elif reports:
            methods_out[method] = reports[0].as_dict()
    return {
        "config": cfg.as_dict(),
        "methods": methods_out,
        "n_replicates": cfg.experiment.replicates,
    }


def run_experiment(cfg: ExperimentConfig, outdir, exp_draw_size=None) -> dict:
    """Run (or resume) all replicates, then aggregate.

    Returns the aggregated report and writes ``aggregated.json``.  Existing
    complete shards are reused: outputs are identical whether or not the run
    was interrupted, and independent of the worker count.
    """
    outdir = Path(outdir)
    (outdir / "replicates").mkdir(parents=True, exist_ok=True)
    if cfg.experiment.dump_points:
        (outdir / "points").mkdir(parents=True, exist_ok=True)
    pending = [
        rep for rep in range(cfg.experiment.replicates)
        if not _shard_complete(cfg, outdir, rep)
    ]
    workers = max(1, cfg.experiment.workers)
    if workers > 1 and len(pending) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [
                pool.submit(_run_shard, cfg, str(outdir), rep, exp_draw_size)
                for rep in pending
            ]
            for fut in futures:
                fut.result()
    else:
        for rep in pending:
            _run_shard(cfg, str(outdir), rep, exp_draw_size)
    aggregated = aggregate_results(cfg, outdir)
    payload = json.dumps(aggregated, sort_keys=True, indent=2) + "\n"
    tmp = outdir / "aggregated.json.tmp"
    tmp.write_text(payload, encoding="utf-8")
    os.replace(tmp, outdir / "aggregated.json")
    return aggregated


def run_sweep(cfg: ExperimentConfig, outdir) -> list:
    """Run the experiment across the configured n_exp grid.

    Within a replicate the observational dataset is shared and the
    experimental datasets are nested prefixes of one max-size draw, so the
    grid differences isolate the effect of experimental sample size.
    """
    grid = tuple(cfg.sweep.n_exp_grid)
    if not grid:
        raise ValueError("sweep.n_exp_grid is empty")
    outdir = Path(outdir)
    draw = max(grid)
    results = []
    for n_exp in grid:
        sub = cfg.replace_data(n_exp=int(n_exp)).replace_experiment(
            replicates=cfg.sweep.replicates
        )
        sub_out = outdir / f"n_exp_{int(n_exp)}"
        results.append(run_experiment(sub, sub_out, exp_draw_size=draw))
    return results


ORACLE_COLUMNS = (
    "point", "mu1", "mu0", "p11", "p10", "p01", "p00", "lower", "upper", "pns",
)


def oracle_dump(cfg: ExperimentConfig, out_path, z_rows=None, n_points: int = 10,
                seed: int = 0) -> dict:
    """Exact oracle table for external verification, plus an audit footer.

    Dumps per-point marginal atoms, sharp bounds and conditional PNS.  The
    footer records the hidden-weight sum, the worst simplex deviation, the
    feasibility pass rate at 1e-12, and the number of near-deterministic
    treatment strata (reported, never filtered).
    """
    data_cfg = cfg.data
    if data_cfg.dgp == "lowdim":
        scm = build_lowdim(data_cfg)
        if z_rows is None:
            z_rows = scm_lowdim.sample_covariates(scm, n_points, seed)
        z_rows = np.atleast_2d(np.asarray(z_rows, dtype=float))
        atoms = scm_lowdim.marginal_atoms_batch(scm, z_rows)
        pns = scm_lowdim.marginal_pns_batch(scm, z_rows)
        _, weights = scm_lowdim.hidden_configs(scm)
    else:
        scm, source = build_highdim(data_cfg)
        if z_rows is None:
            rng = np.random.default_rng(seed)
            z_rows = source.rows[rng.integers(0, source.rows.shape[0], n_points)]
        z_rows = np.atleast_2d(np.asarray(z_rows, dtype=float))
        atoms = scm_highdim.marginal_atoms_batch(scm, z_rows)
        pns = scm_highdim.true_pns_obs_batch(scm, z_rows)
        _, weights = scm_highdim.latent_configs(scm)
    lower, upper, _ = bounds.plug_in_envelope(atoms)
    p_treat = atoms[:, 2] + atoms[:, 3]  # p11 + p10
    audit = {
        "weights_sum": float(weights.sum()),
        "max_simplex_error": float(np.abs(atoms[:, 2:].sum(axis=1) - 1.0).max()),
        "feasible_at_1e-12": int(bounds.check_feasibility(atoms, 1e-12).sum()),
        "n_points": int(atoms.shape[0]),
        "pns_in_bounds": int(
            ((lower - 1e-12 <= pns) & (pns <= upper + 1e-12)).sum()
        ),
        "near_deterministic_treatment": int(
            (np.minimum(p_treat, 1.0 - p_treat) < 0.01).sum()
        ),
    }
    rows = []
    for i in range(atoms.shape[0]):
        rows.append({
            "point": i,
            "mu1": atoms[i, 0], "mu0": atoms[i, 1], "p11": atoms[i, 2],
            "p10": atoms[i, 3], "p01": atoms[i, 4], "p00": atoms[i, 5],
            "lower": lower[i], "upper": upper[i], "pns": pns[i],
        })
    out_path = Path(out_path)
    tmp = out_path.with_suffix(out_path.suffix + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ORACLE_COLUMNS)
        for row in rows:
            writer.writerow([_format_value(row[c]) for c in ORACLE_COLUMNS])
        for key in sorted(audit):
            fh.write(f"# {key} = {_format_value(audit[key])}\n")
    os.replace(tmp, out_path)
    return audit


PLOT_COLUMNS = ("method", "n_obs", "n_exp", "metric", "value", "ci_lo", "ci_hi")


def emit_plot_data(results_dirs, out_path) -> list:
    """Flatten aggregated JSON files into one tidy long-format CSV.

    Accepts a single run directory, a sweep directory (containing
    ``n_exp_*`` subruns), or an explicit list of run directories.
    """
    if isinstance(results_dirs, (str, Path)):
        root = Path(results_dirs)
        if (root / "aggregated.json").exists():
            dirs = [root]
        else:
            dirs = sorted(
                (p for p in root.iterdir() if (p / "aggregated.json").exists()),
                key=lambda p: p.name,
            )
    else:
        dirs = [Path(p) for p in results_dirs]
    if not dirs:
        raise FileNotFoundError(f"no aggregated.json found under {results_dirs}")
    rows = []
    for d in dirs:
        agg = json.loads((d / "aggregated.json").read_text(encoding="utf-8"))
        data_cfg = agg["config"]["data"]
        for method in sorted(agg["methods"]):
            stats = agg["methods"][method]
            for metric in metrics.METRIC_FIELDS:
                rows.append({
                    "method": method,
                    "n_obs": data_cfg["n_obs"],
                    "n_exp": data_cfg["n_exp"],
                    "metric": metric,
                    "value": stats[metric],
                    "ci_lo": stats.get(f"{metric}_ci_lo", stats[metric]),
                    "ci_hi": stats.get(f"{metric}_ci_hi", stats[metric]),
                })
    _write_csv_atomic(Path(out_path), PLOT_COLUMNS, rows)
    return rows
