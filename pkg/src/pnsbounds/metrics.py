"""Interval quality metrics and replicate aggregation.

Per test point a method produces an interval; given the oracle PNS and the
oracle identified set we report the fraction of feasibility-audit passes,
point and identified-set coverage at the nominal level, mean width, and the
Winkler interval score

    IS = (u - l) + (2/alpha) (l - y)_+ + (2/alpha) (y - u)_+,

a proper scoring rule that equals the width exactly when the interval
covers.  Crossed intervals always count as non-covering and are scored with
their raw clipped endpoints.  Replicate aggregation reports the mean with a
normal-approximation 95% Monte Carlo confidence interval.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bounds import PnsInterval

DEFAULT_ALPHA = 0.05
ID_SET_TOL = 1e-9

METRIC_FIELDS = (
    "pct_valid",
    "point_coverage",
    "id_set_coverage",
    "mean_width",
    "interval_score",
    "crossed_rate",
)


@dataclass
class MetricsReport:
    """Metric values for one replicate, or replicate means with CIs."""

    pct_valid: float
    point_coverage: float
    id_set_coverage: float
    mean_width: float
    interval_score: float
    crossed_rate: float
    n_test: int
    n_replicates: int = 1
    ci: dict | None = None

    def as_dict(self) -> dict:
        out = {name: getattr(self, name) for name in METRIC_FIELDS}
        out["n_test"] = self.n_test
        out["n_replicates"] = self.n_replicates
        if self.ci is not None:
            for name, (lo, hi) in self.ci.items():
                out[f"{name}_ci_lo"] = lo
                out[f"{name}_ci_hi"] = hi
        return out


def interval_score(interval, y: float, alpha: float = DEFAULT_ALPHA) -> float:
    """Winkler score of one interval against the true value."""
    if isinstance(interval, PnsInterval):
        lower, upper = interval.lower, interval.upper
    else:
        lower, upper = interval
    return float(interval_score_arrays(np.array([lower]), np.array([upper]),
                                       np.array([y]), alpha)[0])


def interval_score_arrays(lower, upper, y, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    y = np.asarray(y, dtype=float)
    return (
        (upper - lower)
        + (2.0 / alpha) * np.maximum(lower - y, 0.0)
        + (2.0 / alpha) * np.maximum(y - upper, 0.0)
    )


def evaluate_arrays(
    lower,
    upper,
    crossed,
    oracle_pns,
    oracle_lower,
    oracle_upper,
    feasible,
    alpha: float = DEFAULT_ALPHA,
    id_tol: float = ID_SET_TOL,
) -> MetricsReport:
    """Array-based core of :func:`evaluate`; all inputs aligned per point."""
    arrays = [np.asarray(a) for a in
              (lower, upper, crossed, oracle_pns, oracle_lower, oracle_upper, feasible)]
    n = arrays[0].shape[0]
    if any(a.shape[0] != n for a in arrays):
        raise ValueError("per-point arrays must have equal length")
    lower, upper, crossed, y, olo, ohi, feasible = arrays
    crossed = crossed.astype(bool)
    not_crossed = ~crossed
    point_cov = not_crossed & (lower <= y) & (y <= upper)
    id_cov = not_crossed & (lower <= olo + id_tol) & (upper >= ohi - id_tol)
    return MetricsReport(
        pct_valid=float(np.mean(feasible.astype(float))),
        point_coverage=float(point_cov.mean()),
        id_set_coverage=float(id_cov.mean()),
        mean_width=float((upper - lower).mean()),
        interval_score=float(interval_score_arrays(lower, upper, y, alpha).mean()),
        crossed_rate=float(crossed.mean()),
        n_test=n,
    )


def evaluate(
    intervals,
    oracle_pns,
    oracle_bounds,
    atoms_audit,
    alpha: float = DEFAULT_ALPHA,
    id_tol: float = ID_SET_TOL,
) -> MetricsReport:
    """Metrics for a list of intervals against the oracle.

    ``oracle_bounds`` is the pair of per-point arrays (lower, upper) of the
    identified set; ``atoms_audit`` the per-point feasibility flags of the
    method's raw atoms.
    """
    lower = np.array([iv.lower for iv in intervals])
    upper = np.array([iv.upper for iv in intervals])
    crossed = np.array([iv.crossed for iv in intervals])
    return evaluate_arrays(
        lower, upper, crossed, oracle_pns, oracle_bounds[0], oracle_bounds[1],
        atoms_audit, alpha=alpha, id_tol=id_tol,
    )


def aggregate_replicates(reports) -> MetricsReport:
    """Replicate means with 95% normal-approximation confidence intervals."""
    reports = list(reports)
    if len(reports) < 2:
        raise ValueError("aggregation needs at least two replicates")
    k = len(reports)
    means = {}
    ci = {}
    for name in METRIC_FIELDS:
        values = np.array([getattr(r, name) for r in reports], dtype=float)
        mean = float(values.mean())
        half = 1.96 * float(values.std(ddof=1)) / np.sqrt(k)
        means[name] = mean
        ci[name] = (mean - half, mean + half)
    return MetricsReport(
        **means,
        n_test=reports[0].n_test,
        n_replicates=k,
        ci=ci,
    )
