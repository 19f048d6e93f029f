"""High-dimensional semi-synthetic SCM over real-valued covariates.

Observed covariates are taken as fixed external rows (a benchmark file or a
synthetic stand-in); confounding comes from k latent Bernoulli variables
that shift a clipped base propensity and enter a logistic outcome model with
pairwise latent and latent-covariate interaction terms.  Since the latent
variables have finite support, everything conditional on the observed row is
an exact weighted sum over the 2^k latent configurations, and the
theoretical conditional PNS follows from a shared uniform threshold coupling
of the two potential outcomes:

    PNS(row) = sum_h [p_Y(1; row, h) - p_Y(0; row, h)]_+ P(H = h).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .bounds import plug_in_envelope
from .scm_lowdim import (
    EXPERIMENTAL,
    EXPERIMENTAL_TREATMENT_PROB,
    RegimeDataset,
    _canonical_regime,
)

MAX_LATENT = 20  # enumeration budget 2^k


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class SparseLogisticPropensity:
    """Base propensity p(z_obs): logistic of a sparse linear index."""

    indices: np.ndarray
    coefs: np.ndarray
    intercept: float

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64))
        object.__setattr__(self, "coefs", np.asarray(self.coefs, dtype=float))

    def __call__(self, z_obs: np.ndarray) -> np.ndarray:
        z_obs = np.atleast_2d(z_obs)
        return sigmoid(z_obs[:, self.indices] @ self.coefs + self.intercept)

    def to_config(self) -> dict:
        return {
            "kind": "sparse_logistic",
            "indices": self.indices.tolist(),
            "coefs": self.coefs.tolist(),
            "intercept": self.intercept,
        }

    @classmethod
    def from_config(cls, config: dict) -> "SparseLogisticPropensity":
        return cls(
            indices=config["indices"],
            coefs=config["coefs"],
            intercept=float(config["intercept"]),
        )


@dataclass(frozen=True)
class CovariateSource:
    """Fixed observed-covariate rows plus a record of where they came from."""

    rows: np.ndarray
    origin: str

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim != 2 or rows.shape[0] == 0:
            raise ValueError("covariate source must be a nonempty 2-D matrix")
        if not np.all(np.isfinite(rows)):
            raise ValueError("covariate source contains non-finite entries")
        object.__setattr__(self, "rows", rows)

    @property
    def d_obs(self) -> int:
        return self.rows.shape[1]


@dataclass(frozen=True)
class HighDimScm:
    """Latent-Bernoulli confounded DGP over fixed observed covariates.

    Outcome coefficients are stored per treatment arm with a leading axis of
    length 2 indexed by x: ``intercepts[x]``, ``beta_obs[x]`` (linear in the
    observed row), ``c_latent[x]`` (linear in centered latents),
    ``d_pairwise[x]`` (strictly upper-triangular pairwise latent terms) and
    ``r_inter[x]`` / ``v_dirs[x]`` (latent-covariate interactions).
    """

    pi: np.ndarray
    gamma: float
    alpha_conf: np.ndarray
    eps_clip: float
    base_propensity: SparseLogisticPropensity
    intercepts: np.ndarray
    beta_obs: np.ndarray
    c_latent: np.ndarray
    d_pairwise: np.ndarray
    r_inter: np.ndarray
    v_dirs: np.ndarray

    def __post_init__(self):
        for name in ("pi", "alpha_conf", "intercepts", "beta_obs", "c_latent",
                     "d_pairwise", "r_inter", "v_dirs"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        k = self.pi.shape[0]
        if np.any(self.pi <= 0.0) or np.any(self.pi >= 1.0):
            raise ValueError("latent Bernoulli means must lie strictly in (0, 1)")
        if np.sum(np.abs(self.alpha_conf)) > 1.0 + 1e-12:
            raise ValueError("sum |alpha_conf| must be <= 1")
        if not 0.0 < self.eps_clip < 0.5:
            raise ValueError("eps_clip must lie in (0, 0.5)")
        if self.gamma < 0.0:
            raise ValueError("gamma must be nonnegative")
        d = self.beta_obs.shape[1] if self.beta_obs.ndim == 2 else 0
        expected = {
            "alpha_conf": (k,),
            "intercepts": (2,),
            "beta_obs": (2, d),
            "c_latent": (2, k),
            "d_pairwise": (2, k, k),
            "r_inter": (2, k),
            "v_dirs": (2, k, d),
        }
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} must have shape {shape}")

    @property
    def k(self) -> int:
        return self.pi.shape[0]

    @property
    def d_obs(self) -> int:
        return self.beta_obs.shape[1]

    def to_config(self) -> dict:
        return {
            "pi": self.pi.tolist(),
            "gamma": self.gamma,
            "alpha_conf": self.alpha_conf.tolist(),
            "eps_clip": self.eps_clip,
            "base_propensity": self.base_propensity.to_config(),
            "intercepts": self.intercepts.tolist(),
            "beta_obs": self.beta_obs.tolist(),
            "c_latent": self.c_latent.tolist(),
            "d_pairwise": self.d_pairwise.tolist(),
            "r_inter": self.r_inter.tolist(),
            "v_dirs": self.v_dirs.tolist(),
        }

    @classmethod
    def from_config(cls, config: dict) -> "HighDimScm":
        return cls(
            pi=config["pi"],
            gamma=float(config["gamma"]),
            alpha_conf=config["alpha_conf"],
            eps_clip=float(config["eps_clip"]),
            base_propensity=SparseLogisticPropensity.from_config(config["base_propensity"]),
            intercepts=config["intercepts"],
            beta_obs=config["beta_obs"],
            c_latent=config["c_latent"],
            d_pairwise=config["d_pairwise"],
            r_inter=config["r_inter"],
            v_dirs=config["v_dirs"],
        )


def latent_configs(scm: HighDimScm) -> tuple[np.ndarray, np.ndarray]:
    """All latent configurations and product weights; weights sum to one."""
    k = scm.k
    if k > MAX_LATENT:
        raise ValueError(f"enumeration budget exceeded: k={k} > {MAX_LATENT}")
    if k == 0:
        return np.zeros((1, 0)), np.ones(1)
    grid = np.array(
        [[(i >> j) & 1 for j in range(k)] for i in range(2**k)], dtype=float
    )
    weights = np.prod(np.where(grid == 1.0, scm.pi, 1.0 - scm.pi), axis=1)
    return grid, weights


def _check_h(scm: HighDimScm, h) -> np.ndarray:
    h = np.asarray(h, dtype=float)
    if h.shape[-1] != scm.k:
        raise ValueError(f"h must have {scm.k} entries, got shape {h.shape}")
    return h


def propensity(scm: HighDimScm, z_obs, h):
    """Treatment probability given observed row(s) and latent vector(s).

    clip(p(z_obs) + gamma * sum_j alpha_j (h_j - pi_j), eps, 1 - eps).
    Broadcasts one latent vector against many rows or row-wise latents.
    """
    h = _check_h(scm, h)
    base = scm.base_propensity(np.atleast_2d(np.asarray(z_obs, dtype=float)))
    shift = scm.gamma * (h - scm.pi) @ scm.alpha_conf
    raw = base + shift
    return np.clip(raw, scm.eps_clip, 1.0 - scm.eps_clip)


def _outcome_logits(scm: HighDimScm, x: int, z_obs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Logits of the outcome model; u = h - pi, one row of u per z row."""
    linear = scm.intercepts[x] + z_obs @ scm.beta_obs[x]
    if scm.k == 0:
        return linear
    upper = np.triu(scm.d_pairwise[x], k=1)
    latent_lin = u @ scm.c_latent[x]
    latent_pair = np.einsum("nj,jl,nl->n", u, upper, u)
    inter = np.sum((u * scm.r_inter[x]) * (z_obs @ scm.v_dirs[x].T), axis=1)
    return linear + latent_lin + latent_pair + inter


def outcome_prob(scm: HighDimScm, x: int, z_obs, h):
    """P(Y=1 | X=x, observed row, latent vector), strictly inside (0, 1)."""
    if x not in (0, 1):
        raise ValueError("x must be binary")
    z_obs = np.atleast_2d(np.asarray(z_obs, dtype=float))
    h = np.atleast_2d(_check_h(scm, h))
    if h.shape[0] == 1 and z_obs.shape[0] > 1:
        h = np.broadcast_to(h, (z_obs.shape[0], scm.k))
    u = h - scm.pi
    return sigmoid(_outcome_logits(scm, x, z_obs, u))


def marginal_atoms_batch(scm: HighDimScm, z_obs) -> np.ndarray:
    """Exact marginal atoms per observed row, shape (n, 6).

    mu_x sums the outcome probability over latent configurations;
    p_xy sums P(X=x | row, h) P(Y=y | row, h, x) P(h).  Marginalizing over
    the latents preserves the compatibility inequalities.
    """
    z_obs = np.atleast_2d(np.asarray(z_obs, dtype=float))
    configs, weights = latent_configs(scm)
    n = z_obs.shape[0]
    mu = np.zeros((2, n))
    pxy = np.zeros((2, 2, n))
    base = scm.base_propensity(z_obs)
    for h, w in zip(configs, weights):
        u_row = np.broadcast_to(h - scm.pi, (n, scm.k))
        shift = scm.gamma * float((h - scm.pi) @ scm.alpha_conf) if scm.k else 0.0
        p_treat = np.clip(base + shift, scm.eps_clip, 1.0 - scm.eps_clip)
        p_y = [sigmoid(_outcome_logits(scm, x, z_obs, u_row)) for x in (0, 1)]
        for x_val in (0, 1):
            mu[x_val] += w * p_y[x_val]
            p_x = p_treat if x_val == 1 else 1.0 - p_treat
            pxy[x_val, 1] += w * p_x * p_y[x_val]
            pxy[x_val, 0] += w * p_x * (1.0 - p_y[x_val])
    return np.stack([mu[1], mu[0], pxy[1, 1], pxy[1, 0], pxy[0, 1], pxy[0, 0]], axis=-1)


def marginal_atoms(scm: HighDimScm, z_obs) -> np.ndarray:
    """Exact marginal atoms at one observed row (length-6 array)."""
    z_obs = np.asarray(z_obs, dtype=float)
    if z_obs.ndim != 1:
        raise ValueError("marginal_atoms is per-row; use marginal_atoms_batch")
    return marginal_atoms_batch(scm, z_obs[None, :])[0]


def true_pns_obs_batch(scm: HighDimScm, z_obs) -> np.ndarray:
    """Theoretical conditional PNS per observed row via the shared threshold."""
    z_obs = np.atleast_2d(np.asarray(z_obs, dtype=float))
    configs, weights = latent_configs(scm)
    n = z_obs.shape[0]
    total = np.zeros(n)
    for h, w in zip(configs, weights):
        u_row = np.broadcast_to(h - scm.pi, (n, scm.k))
        p1 = sigmoid(_outcome_logits(scm, 1, z_obs, u_row))
        p0 = sigmoid(_outcome_logits(scm, 0, z_obs, u_row))
        total += w * np.maximum(p1 - p0, 0.0)
    return total


def true_pns_obs(scm: HighDimScm, z_obs) -> float:
    z_obs = np.asarray(z_obs, dtype=float)
    if z_obs.ndim != 1:
        raise ValueError("true_pns_obs is per-row; use true_pns_obs_batch")
    return float(true_pns_obs_batch(scm, z_obs[None, :])[0])


def oracle_intervals(scm: HighDimScm, z_obs):
    """Sharp marginal bounds and PNS per observed row."""
    atoms = marginal_atoms_batch(scm, z_obs)
    lower, upper, _ = plug_in_envelope(atoms)
    return lower, upper, true_pns_obs_batch(scm, z_obs)


def sample_highdim(
    scm: HighDimScm, source: CovariateSource, n: int, regime: str, seed: int
) -> RegimeDataset:
    """Draw n units: rows resampled with replacement, fresh latents per unit."""
    if n < 1:
        raise ValueError("n must be >= 1")
    regime = _canonical_regime(regime)
    rng = np.random.default_rng(seed)
    rows = source.rows[rng.integers(0, source.rows.shape[0], size=n)]
    h = (rng.random((n, scm.k)) < scm.pi).astype(np.float64)
    if regime == EXPERIMENTAL:
        x = (rng.random(n) < EXPERIMENTAL_TREATMENT_PROB).astype(np.int64)
    else:
        p_treat = propensity(scm, rows, h)
        x = (rng.random(n) < p_treat).astype(np.int64)
    u = h - scm.pi
    p1 = sigmoid(_outcome_logits(scm, 1, rows, u))
    p0 = sigmoid(_outcome_logits(scm, 0, rows, u))
    p_y = np.where(x == 1, p1, p0)
    y = (rng.random(n) < p_y).astype(np.int64)
    return RegimeDataset(covariates=rows, treatment=x, outcome=y, regime=regime)


def sample_xy_given_row(scm: HighDimScm, z_row, n: int, regime: str, seed: int):
    """Draw (h, x, y) at one fixed observed row, for enumeration cross-checks."""
    regime = _canonical_regime(regime)
    z_row = np.asarray(z_row, dtype=float)[None, :]
    rng = np.random.default_rng(seed)
    h = (rng.random((n, scm.k)) < scm.pi).astype(np.float64)
    rows = np.broadcast_to(z_row, (n, z_row.shape[1]))
    if regime == EXPERIMENTAL:
        x = (rng.random(n) < EXPERIMENTAL_TREATMENT_PROB).astype(np.int64)
    else:
        x = (rng.random(n) < propensity(scm, rows, h)).astype(np.int64)
    u = h - scm.pi
    p1 = sigmoid(_outcome_logits(scm, 1, rows, u))
    p0 = sigmoid(_outcome_logits(scm, 0, rows, u))
    y = (rng.random(n) < np.where(x == 1, p1, p0)).astype(np.int64)
    return x, y


def synthetic_covariates(n_rows: int, d_obs: int = 200, seed: int = 0) -> CovariateSource:
    """Seeded standard-normal stand-in for users without a benchmark file."""
    rng = np.random.default_rng(seed)
    return CovariateSource(rows=rng.standard_normal((n_rows, d_obs)), origin="synthetic")


def load_covariates_csv(path) -> CovariateSource:
    """Read a headered delimited file of all-numeric covariate columns."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ValueError(f"covariate file {path} is empty")
        rows = [[float(v) for v in row] for row in reader if row]
    if not rows:
        raise ValueError(f"covariate file {path} has no data rows")
    return CovariateSource(rows=np.asarray(rows, dtype=float), origin="file")


def random_highdim_scm(
    d_obs: int,
    k: int = 5,
    gamma: float = 1.0,
    eps_clip: float = 0.05,
    seed: int = 0,
) -> HighDimScm:
    """Draw a frozen coefficient configuration for the high-dimensional DGP.

    Linear outcome coefficients are rescaled so the observed-covariate logit
    contribution has roughly unit scale at standardized covariates, keeping
    typical total logits within about +-6.  All draws are seeded so the
    configuration can be reproduced from (d_obs, k, gamma, eps_clip, seed).
    """
    rng = np.random.default_rng(seed)
    pi = rng.uniform(0.25, 0.75, size=k)
    alpha = rng.uniform(-1.0, 1.0, size=k)
    total = np.sum(np.abs(alpha))
    if total > 0:
        alpha = alpha / total  # sum |alpha_j| = 1
    n_active = max(1, d_obs // 20)
    prop_idx = rng.choice(d_obs, size=n_active, replace=False)
    prop_coef = rng.uniform(-1.0, 1.0, size=n_active)
    prop_coef *= 1.2 / max(1.0, np.linalg.norm(prop_coef))
    base = SparseLogisticPropensity(
        indices=np.sort(prop_idx),
        coefs=prop_coef[np.argsort(prop_idx)],
        intercept=float(rng.uniform(-0.4, 0.4)),
    )
    intercepts = rng.uniform(-0.5, 0.5, size=2)
    beta = rng.uniform(-1.0, 1.0, size=(2, d_obs))
    for x in (0, 1):
        norm = np.linalg.norm(beta[x])
        if norm > 0:
            beta[x] *= 1.5 / norm
    c = rng.uniform(-0.8, 0.8, size=(2, k))
    d_pair = np.triu(rng.uniform(-0.3, 0.3, size=(2, k, k)), k=1)
    r = rng.uniform(-0.4, 0.4, size=(2, k))
    v = rng.standard_normal((2, k, d_obs))
    norms = np.linalg.norm(v, axis=2, keepdims=True)
    v = np.divide(v, norms, out=np.zeros_like(v), where=norms > 0)
    return HighDimScm(
        pi=pi,
        gamma=gamma,
        alpha_conf=alpha,
        eps_clip=eps_clip,
        base_propensity=base,
        intercepts=intercepts,
        beta_obs=beta,
        c_latent=c,
        d_pairwise=d_pair,
        r_inter=r,
        v_dirs=v,
    )
