"""Low-dimensional synthetic SCM with exact ground-truth oracles.

Binary treatment, binary outcome, d binary covariates generated directly
from independent Bernoulli exogenous noise.  Treatment follows a linear
index rule ``X = 1{alpha'Z + e_X > 0.5}`` and the outcome is the window
indicator ``f_Y(x, m, e) = 1{0 < Cx + m + e < 1} + 1{1 < Cx + m + e < 2}``
with ``m = beta'Z``.  Because the exogenous noise is discrete, every
conditional quantity is computable by enumerating the four (e_X, e_Y)
configurations, and quantities conditional on the observed covariate prefix
follow by weighting the 2^n_hidden configurations of the trailing hidden
dimensions.

The learner only ever sees the first ``d - n_hidden`` covariate columns,
which induces hidden confounding while keeping the oracle exact.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .bounds import AtomVector, plug_in_envelope

OBSERVATIONAL = "observational"
EXPERIMENTAL = "experimental"

#: Treatment probability in the experimental regime (randomized assignment).
EXPERIMENTAL_TREATMENT_PROB = 0.5


def _canonical_regime(regime: str) -> str:
    key = str(regime).lower()
    if key in ("obs", OBSERVATIONAL):
        return OBSERVATIONAL
    if key in ("exp", EXPERIMENTAL):
        return EXPERIMENTAL
    raise ValueError(f"unknown regime {regime!r}")


@dataclass(frozen=True)
class RegimeSample:
    """One sampled unit: observed covariates, treatment, outcome, regime."""

    z_obs: np.ndarray
    x: int
    y: int
    regime: str


@dataclass
class RegimeDataset:
    """Column-oriented container for sampled units of one regime."""

    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    regime: str

    def __len__(self) -> int:
        return len(self.treatment)

    def row(self, i: int) -> RegimeSample:
        return RegimeSample(
            z_obs=self.covariates[i].copy(),
            x=int(self.treatment[i]),
            y=int(self.outcome[i]),
            regime=self.regime,
        )


@dataclass(frozen=True)
class LowDimScm:
    """Fully parameterized low-dimensional SCM.

    All Bernoulli means must be strictly inside (0, 1) and the trailing
    ``n_hidden`` covariate dimensions are the hidden confounders.
    """

    pi_z: np.ndarray
    pi_x: float
    pi_y: float
    alpha: np.ndarray
    beta: np.ndarray
    c_effect: float
    n_hidden: int = 5

    def __post_init__(self):
        object.__setattr__(self, "pi_z", np.asarray(self.pi_z, dtype=float))
        object.__setattr__(self, "alpha", np.asarray(self.alpha, dtype=float))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float))
        d = self.pi_z.shape[0]
        if self.alpha.shape != (d,) or self.beta.shape != (d,):
            raise ValueError("alpha and beta must match the covariate dimension")
        means = np.concatenate([self.pi_z, [self.pi_x, self.pi_y]])
        if np.any(means <= 0.0) or np.any(means >= 1.0):
            raise ValueError("all Bernoulli means must lie strictly in (0, 1)")
        if not 0 <= self.n_hidden < d:
            raise ValueError("n_hidden must be in [0, d)")

    @property
    def d(self) -> int:
        return self.pi_z.shape[0]

    @property
    def d_obs(self) -> int:
        return self.d - self.n_hidden

    def to_config(self) -> dict:
        return {
            "pi_z": self.pi_z.tolist(),
            "pi_x": self.pi_x,
            "pi_y": self.pi_y,
            "alpha": self.alpha.tolist(),
            "beta": self.beta.tolist(),
            "c_effect": self.c_effect,
            "n_hidden": self.n_hidden,
        }

    @classmethod
    def from_config(cls, config: dict) -> "LowDimScm":
        return cls(
            pi_z=config["pi_z"],
            pi_x=float(config["pi_x"]),
            pi_y=float(config["pi_y"]),
            alpha=config["alpha"],
            beta=config["beta"],
            c_effect=float(config["c_effect"]),
            n_hidden=int(config.get("n_hidden", 5)),
        )


def outcome_fn(x, m, e, c_effect: float):
    """Window-indicator outcome; strict inequalities at the boundaries.

    Vectorizes over any broadcastable combination of inputs.
    """
    v = c_effect * np.asarray(x, dtype=float) + np.asarray(m, dtype=float) + np.asarray(
        e, dtype=float
    )
    out = (((0.0 < v) & (v < 1.0)) | ((1.0 < v) & (v < 2.0))).astype(np.int64)
    if out.ndim == 0:
        return int(out)
    return out


def _full_z(scm: LowDimScm, z) -> np.ndarray:
    z = np.atleast_2d(np.asarray(z, dtype=float))
    if z.shape[1] != scm.d:
        raise ValueError(f"z must have {scm.d} columns, got {z.shape[1]}")
    return z


def atoms_given_full_z(scm: LowDimScm, z) -> np.ndarray:
    """Exact atom vectors for full covariate rows, shape (n, 6).

    Interventional probabilities sum over e_Y; observational joints sum over
    the four (e_X, e_Y) configurations with the realized treatment
    ``x(z, e_X) = 1{alpha'z + e_X > 0.5}``.
    """
    z = _full_z(scm, z)
    mx = z @ scm.alpha
    my = z @ scm.beta
    pe_y = np.array([1.0 - scm.pi_y, scm.pi_y])
    pe_x = np.array([1.0 - scm.pi_x, scm.pi_x])

    mu = np.zeros((2, z.shape[0]))
    for x_do in (0, 1):
        for e_y in (0, 1):
            mu[x_do] += pe_y[e_y] * outcome_fn(x_do, my, e_y, scm.c_effect)

    pxy = np.zeros((2, 2, z.shape[0]))
    for e_x in (0, 1):
        x_real = (mx + e_x > 0.5).astype(np.int64)
        for e_y in (0, 1):
            w = pe_x[e_x] * pe_y[e_y]
            y_real = outcome_fn(x_real, my, e_y, scm.c_effect)
            for x_val in (0, 1):
                for y_val in (0, 1):
                    pxy[x_val, y_val] += w * ((x_real == x_val) & (y_real == y_val))

    return np.stack(
        [mu[1], mu[0], pxy[1, 1], pxy[1, 0], pxy[0, 1], pxy[0, 0]], axis=-1
    )


def pns_given_full_z(scm: LowDimScm, z) -> np.ndarray:
    """Exact conditional PNS for full covariate rows, shape (n,)."""
    z = _full_z(scm, z)
    my = z @ scm.beta
    pe_y = np.array([1.0 - scm.pi_y, scm.pi_y])
    total = np.zeros(z.shape[0])
    for e_y in (0, 1):
        helped = (outcome_fn(1, my, e_y, scm.c_effect) == 1) & (
            outcome_fn(0, my, e_y, scm.c_effect) == 0
        )
        total += pe_y[e_y] * helped
    return total


def enumerate_atoms(scm: LowDimScm, z) -> AtomVector:
    """Exact atoms at one full covariate vector z of length d."""
    z = np.asarray(z, dtype=float)
    if z.shape != (scm.d,):
        raise ValueError(f"z must have shape ({scm.d},), got {z.shape}")
    return AtomVector.from_array(atoms_given_full_z(scm, z[None, :])[0])


def true_pns(scm: LowDimScm, z) -> float:
    """Exact conditional PNS at one full covariate vector."""
    z = np.asarray(z, dtype=float)
    if z.shape != (scm.d,):
        raise ValueError(f"z must have shape ({scm.d},), got {z.shape}")
    return float(pns_given_full_z(scm, z[None, :])[0])


def hidden_configs(scm: LowDimScm) -> tuple[np.ndarray, np.ndarray]:
    """All hidden-confounder configurations and their product weights.

    Returns (configs, weights) with shapes (2^n_hidden, n_hidden) and
    (2^n_hidden,); the weights sum to one.
    """
    k = scm.n_hidden
    if k == 0:
        return np.zeros((1, 0)), np.ones(1)
    grid = np.array(
        [[(i >> j) & 1 for j in range(k)] for i in range(2**k)], dtype=float
    )
    pi_hidden = scm.pi_z[scm.d - k :]
    weights = np.prod(np.where(grid == 1.0, pi_hidden, 1.0 - pi_hidden), axis=1)
    return grid, weights


def marginal_atoms_batch(scm: LowDimScm, z_obs) -> np.ndarray:
    """Atoms given only observed covariates: weighted sum over hidden configs."""
    z_obs = np.atleast_2d(np.asarray(z_obs, dtype=float))
    if z_obs.shape[1] != scm.d_obs:
        raise ValueError(f"z_obs must have {scm.d_obs} columns, got {z_obs.shape[1]}")
    configs, weights = hidden_configs(scm)
    total = np.zeros((z_obs.shape[0], 6))
    for h, w in zip(configs, weights):
        full = np.hstack([z_obs, np.broadcast_to(h, (z_obs.shape[0], scm.n_hidden))])
        total += w * atoms_given_full_z(scm, full)
    return total


def marginal_pns_batch(scm: LowDimScm, z_obs) -> np.ndarray:
    """Conditional PNS given only observed covariates."""
    z_obs = np.atleast_2d(np.asarray(z_obs, dtype=float))
    if z_obs.shape[1] != scm.d_obs:
        raise ValueError(f"z_obs must have {scm.d_obs} columns, got {z_obs.shape[1]}")
    configs, weights = hidden_configs(scm)
    total = np.zeros(z_obs.shape[0])
    for h, w in zip(configs, weights):
        full = np.hstack([z_obs, np.broadcast_to(h, (z_obs.shape[0], scm.n_hidden))])
        total += w * pns_given_full_z(scm, full)
    return total


def marginalize(scm: LowDimScm, z_obs, query: str = "atoms"):
    """Marginalize an oracle query over the hidden confounders at one point."""
    z_obs = np.asarray(z_obs, dtype=float)
    if z_obs.shape != (scm.d_obs,):
        raise ValueError(f"z_obs must have shape ({scm.d_obs},), got {z_obs.shape}")
    if query == "atoms":
        return AtomVector.from_array(marginal_atoms_batch(scm, z_obs[None, :])[0])
    if query == "pns":
        return float(marginal_pns_batch(scm, z_obs[None, :])[0])
    raise ValueError(f"unknown query {query!r}; expected 'atoms' or 'pns'")


def oracle_intervals(scm: LowDimScm, z_obs):
    """Sharp marginal bounds and PNS per observed-covariate row.

    Returns (lower, upper, pns) arrays; the containment
    ``lower <= pns <= upper`` holds exactly by construction.
    """
    atoms = marginal_atoms_batch(scm, z_obs)
    lower, upper, _ = plug_in_envelope(atoms)
    return lower, upper, marginal_pns_batch(scm, z_obs)


def sample_covariates(scm: LowDimScm, n: int, seed: int) -> np.ndarray:
    """Draw n observed-covariate rows from the covariate law (for test sets)."""
    rng = np.random.default_rng(seed)
    z = (rng.random((n, scm.d)) < scm.pi_z).astype(np.float64)
    return z[:, : scm.d_obs]


def sample_dataset(scm: LowDimScm, n: int, regime: str, seed: int) -> RegimeDataset:
    """Draw a dataset of n units; only the observed covariates are emitted.

    Deterministic given seed.  In the experimental regime the treatment is
    randomized as Bernoulli(1/2) independently of the covariates; in the
    observational regime it follows the structural rule.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    regime = _canonical_regime(regime)
    rng = np.random.default_rng(seed)
    z = (rng.random((n, scm.d)) < scm.pi_z).astype(np.float64)
    e_y = (rng.random(n) < scm.pi_y).astype(np.int64)
    if regime == EXPERIMENTAL:
        x = (rng.random(n) < EXPERIMENTAL_TREATMENT_PROB).astype(np.int64)
    else:
        e_x = (rng.random(n) < scm.pi_x).astype(np.int64)
        x = (z @ scm.alpha + e_x > 0.5).astype(np.int64)
    y = outcome_fn(x, z @ scm.beta, e_y, scm.c_effect)
    return RegimeDataset(
        covariates=z[:, : scm.d_obs], treatment=x, outcome=y, regime=regime
    )


def sample_xy_given_z(scm: LowDimScm, z, n: int, regime: str, seed: int):
    """Draw (x, y) pairs at a fixed full covariate vector.

    Used to cross-check enumeration against Monte Carlo frequencies.
    """
    regime = _canonical_regime(regime)
    z = np.asarray(z, dtype=float)
    if z.shape != (scm.d,):
        raise ValueError(f"z must have shape ({scm.d},), got {z.shape}")
    rng = np.random.default_rng(seed)
    e_y = (rng.random(n) < scm.pi_y).astype(np.int64)
    if regime == EXPERIMENTAL:
        x = (rng.random(n) < EXPERIMENTAL_TREATMENT_PROB).astype(np.int64)
    else:
        e_x = (rng.random(n) < scm.pi_x).astype(np.int64)
        x = ((z @ scm.alpha) + e_x > 0.5).astype(np.int64)
    y = outcome_fn(x, float(z @ scm.beta), e_y, scm.c_effect)
    return x, y


def treatment_probability(scm: LowDimScm, z) -> np.ndarray:
    """P(X = 1 | Z = z) in the observational regime, per full-covariate row.

    Exposed so the harness can report (not filter) near-deterministic
    treatment strata.
    """
    z = _full_z(scm, z)
    mx = z @ scm.alpha
    prob = np.zeros(z.shape[0])
    for e_x, w in ((0, 1.0 - scm.pi_x), (1, scm.pi_x)):
        prob += w * (mx + e_x > 0.5)
    return prob


def without_hidden(scm: LowDimScm) -> LowDimScm:
    """The same SCM treated as fully observed (degenerate marginalization)."""
    return replace(scm, n_hidden=0)


# Model 1 of the benchmark family this DGP is adapted from; ships as the
# built-in preset "li-model-1".
_MODEL_1_PI_Z = [
    0.3529, 0.4610, 0.3317, 0.8855, 0.0170,
    0.3808, 0.0281, 0.2208, 0.6177, 0.9820,
    0.1420, 0.8336, 0.8829, 0.5421, 0.0850,
    0.6454, 0.8638, 0.4605, 0.3140, 0.6859,
]
_MODEL_1_ALPHA = [
    0.2592, -0.6581, -0.7503, 0.1629, 0.6520,
    -0.0893, 0.4215, -0.4431, 0.8026, -0.2257,
    0.7166, 0.0651, -0.2207, 0.1564, -0.5069,
    -0.7071, 0.4188, -0.0822, 0.7693, -0.5116,
]
_MODEL_1_BETA = [
    -0.7929, 0.7600, 0.5544, 0.5040, -0.5272,
    0.3786, 0.2693, 0.6716, 0.3960, 0.3252,
    0.6578, 0.8017, 0.0908, -0.0714, -0.0691,
    -0.2226, -0.8484, -0.5843, -0.3249, 0.6256,
]


def model_1() -> LowDimScm:
    """The built-in 20-dimensional preset with 5 hidden confounders."""
    return LowDimScm(
        pi_z=_MODEL_1_PI_Z,
        pi_x=0.6017,
        pi_y=0.4977,
        alpha=_MODEL_1_ALPHA,
        beta=_MODEL_1_BETA,
        c_effect=-0.7795,
        n_hidden=5,
    )


PRESETS = {"li-model-1": model_1}


def from_preset(name: str) -> LowDimScm:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(
            f"unknown preset {name!r}; available: {sorted(PRESETS)}"
        ) from None
