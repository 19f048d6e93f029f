"""Epistemic hypermodel over the anchored network and corrected inference.

A generator MLP maps an epistemic index zeta ~ N(0, I) to the full flat
parameter vector of the anchored network; a frozen prior network of the same
form, scaled by ``prior_scale``, injects irreducible spread:

    theta(zeta) = generator(zeta) + prior_scale * prior(zeta).

Since every generated parameter vector feeds the anchored forward pass, each
epistemic draw satisfies the compatibility constraints automatically.  The
draws act as coherent stochastic realizations of the fitted estimator (a
resampling surrogate, not a Bayesian posterior): per covariate point we
summarize the eight envelope terms across draws by their means and sample
standard deviations, calibrate critical values from the empirical
distribution of studentized extrema, and widen the envelope accordingly:

    lower = max_j [ mean_j - kappa_L * std_j ]
    upper = min_k [ mean_k + kappa_U * std_k ].
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from sklearn.base import BaseEstimator

from . import bounds
from .anchored import (
    AnchoredBoundsEstimator,
    TrainConfig,
    _loss_and_grad_core,
    anchored_layout,
    forward_atoms_multi,
)
from .mlp import ParamLayout, chain_backward, chain_forward, mlp_entries, run_training
from .validation import check_covariates, check_fitted

#: Studentization guard in the critical-value statistics.
STUDENTIZE_EPS = 1e-10

#: Shrink factor on the generator's output weights at initialization, so the
#: initial reducible spread starts small relative to the prior's.
GENERATOR_OUTPUT_SCALE = 0.1


@dataclass
class HyperModel:
    """Generator + frozen prior over flat anchored-network parameters."""

    index_dim: int
    base_layout: ParamLayout
    gen_layout: ParamLayout
    prior_layout: ParamLayout
    gen_params: np.ndarray
    prior_params: np.ndarray
    prior_scale: float

    @property
    def n_gen_layers(self) -> int:
        return sum(1 for name in self.gen_layout.names if name.startswith("hm_W"))

    @property
    def n_prior_layers(self) -> int:
        return sum(1 for name in self.prior_layout.names if name.startswith("hm_W"))


def init_hypermodel(
    base_layout: ParamLayout,
    index_dim: int,
    generator_hidden=(64, 64),
    prior_hidden=(32, 32),
    prior_scale: float = 1.0,
    seed=0,
) -> HyperModel:
    """Construct a hypermodel with seeded generator, prior, and base init.

    The generator's output bias is set to a standard base-network init so the
    mean generated network starts from a sensible point; its output weights
    are shrunk so reducible spread starts small.  The prior keeps fan-in
    weights and a zero output bias, giving zero-mean functional spread.
    """
    ss = np.random.SeedSequence(seed)
    gen_seed, prior_seed, base_seed = ss.spawn(3)
    gen_sizes = (index_dim, *generator_hidden, base_layout.size)
    prior_sizes = (index_dim, *prior_hidden, base_layout.size)
    gen_layout = ParamLayout(entries=mlp_entries("hm_", gen_sizes))
    prior_layout = ParamLayout(entries=mlp_entries("hm_", prior_sizes))
    gen_params = gen_layout.init(gen_seed)
    n_gen = len(gen_sizes) - 1
    gen_layout.view(gen_params, f"hm_W{n_gen - 1}")[...] *= GENERATOR_OUTPUT_SCALE
    gen_layout.view(gen_params, f"hm_b{n_gen - 1}")[...] = base_layout.init(base_seed)
    prior_params = prior_layout.init(prior_seed)
    n_prior = len(prior_sizes) - 1
    prior_layout.view(prior_params, f"hm_b{n_prior - 1}")[...] = 0.0
    return HyperModel(
        index_dim=index_dim,
        base_layout=base_layout,
        gen_layout=gen_layout,
        prior_layout=prior_layout,
        gen_params=gen_params,
        prior_params=prior_params,
        prior_scale=prior_scale,
    )


def _check_zetas(hyper: HyperModel, zetas) -> np.ndarray:
    zetas = np.atleast_2d(np.asarray(zetas, dtype=float))
    if zetas.shape[1] != hyper.index_dim:
        raise ValueError(
            f"epistemic index must have dimension {hyper.index_dim}, "
            f"got {zetas.shape[1]}"
        )
    return zetas


def prior_params_multi(hyper: HyperModel, zetas) -> np.ndarray:
    zetas = _check_zetas(hyper, zetas)
    out, _ = chain_forward(
        hyper.prior_layout, "hm_", hyper.n_prior_layers, hyper.prior_params, zetas
    )
    return out


def sample_params_multi(hyper: HyperModel, zetas) -> np.ndarray:
    """Base parameter vectors for a stack of indices, shape (m, P)."""
    zetas = _check_zetas(hyper, zetas)
    gen, _ = chain_forward(
        hyper.gen_layout, "hm_", hyper.n_gen_layers, hyper.gen_params, zetas
    )
    if hyper.prior_scale != 0.0:
        gen = gen + hyper.prior_scale * prior_params_multi(hyper, zetas)
    return gen


def sample_params(hyper: HyperModel, zeta) -> np.ndarray:
    """Base parameters for one epistemic index; deterministic in zeta."""
    zeta = np.asarray(zeta, dtype=float)
    if zeta.ndim != 1:
        raise ValueError("sample_params takes a single index vector")
    return sample_params_multi(hyper, zeta[None, :])[0]


def enn_loss_and_grad(hyper: HyperModel, gen_params, Z, x, y, is_exp, zetas):
    """Anchored loss averaged over epistemic draws; gradient w.r.t. generator.

    Gradients flow through the generated parameters into the generator only;
    the prior is a constant.
    """
    zetas = _check_zetas(hyper, zetas)
    m = zetas.shape[0]
    gen_out, cache = chain_forward(
        hyper.gen_layout, "hm_", hyper.n_gen_layers, gen_params, zetas
    )
    thetas = gen_out
    if hyper.prior_scale != 0.0:
        thetas = thetas + hyper.prior_scale * prior_params_multi(hyper, zetas)
    losses, theta_grads = _loss_and_grad_core(thetas, hyper.base_layout, Z, x, y, is_exp)
    gen_grads = np.zeros_like(np.asarray(gen_params, dtype=float))
    chain_backward(
        hyper.gen_layout, "hm_", hyper.n_gen_layers, gen_params, cache,
        theta_grads / m, gen_grads,
    )
    return float(losses.mean()), gen_grads


def train_enn(
    hyper: HyperModel,
    Z,
    x,
    y,
    is_exp,
    cfg,
    index_samples: int = 8,
    epoch_callback=None,
) -> HyperModel:
    """Train the generator; returns a hypermodel with updated parameters.

    Each minibatch step draws ``index_samples`` fresh epistemic indices and
    averages the anchored loss over them.  The prior parameters are never
    touched.  Deterministic given cfg.seed.
    """
    Z = np.asarray(Z, dtype=float)
    if cfg.scaler is not None:
        Z = cfg.scaler.transform(Z)
    x = np.asarray(x)
    y = np.asarray(y)
    is_exp = np.asarray(is_exp, dtype=bool)
    ss = np.random.SeedSequence(cfg.seed)
    shuffle_seed, zeta_seed = ss.spawn(2)
    zeta_rng = np.random.default_rng(zeta_seed)
    gen_params = hyper.gen_params.copy()

    def loss_grad(p, batch):
        zetas = zeta_rng.standard_normal((index_samples, hyper.index_dim))
        return enn_loss_and_grad(
            hyper, p, Z[batch], x[batch], y[batch], is_exp[batch], zetas
        )

    run_training(
        gen_params,
        loss_grad,
        Z.shape[0],
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        shuffle_seed=shuffle_seed,
        epoch_callback=epoch_callback,
    )
    return replace(hyper, gen_params=gen_params)


@dataclass(frozen=True)
class BoundTermStats:
    """Per-term Monte Carlo summaries over epistemic draws at one point.

    ``draws`` stacks the raw term values, columns 0..3 the lower terms and
    4..7 the upper terms; standard deviations use the M-1 denominator and
    the constant lower term's is exactly zero.
    """

    means: bounds.BoundTerms
    stds: bounds.BoundTerms
    draws: np.ndarray


@dataclass(frozen=True)
class CriticalValues:
    kappa_l: float
    kappa_u: float
    quantile_level: float


def _term_stats_from_draws(lower_draws, upper_draws) -> BoundTermStats:
    means_l = lower_draws.mean(axis=0)
    means_u = upper_draws.mean(axis=0)
    stds_l = lower_draws.std(axis=0, ddof=1)
    stds_u = upper_draws.std(axis=0, ddof=1)
    stds_l[bounds.CONSTANT_LOWER_TERM] = 0.0
    return BoundTermStats(
        means=bounds.BoundTerms(lower=means_l, upper=means_u),
        stds=bounds.BoundTerms(lower=stds_l, upper=stds_u),
        draws=np.hstack([lower_draws, upper_draws]),
    )


def bound_statistics(hyper: HyperModel, z, M: int, seed) -> BoundTermStats:
    """Draw M epistemic indices and summarize the envelope terms at z.

    ``z`` must already be standardized the way the hypermodel was trained.
    Every draw's atoms are feasible (the anchoring holds for each zeta).
    """
    if M < 2:
        raise ValueError("M must be >= 2")
    z = np.asarray(z, dtype=float).reshape(1, -1)
    zetas = np.random.default_rng(seed).standard_normal((M, hyper.index_dim))
    lower, upper = _term_draws(hyper, z, zetas)
    return _term_stats_from_draws(lower[:, 0, :], upper[:, 0, :])


def _term_draws(hyper: HyperModel, Z, zetas, draw_chunk: int = 512):
    """Envelope-term draws for all rows of Z: arrays (M, n, 4) and (M, n, 4)."""
    M = zetas.shape[0]
    n = Z.shape[0]
    lower = np.empty((M, n, 4))
    upper = np.empty((M, n, 4))
    for start in range(0, M, draw_chunk):
        thetas = sample_params_multi(hyper, zetas[start : start + draw_chunk])
        atoms = forward_atoms_multi(thetas, hyper.base_layout, Z)
        terms = bounds.bound_terms(atoms)
        lower[start : start + draw_chunk] = terms.lower
        upper[start : start + draw_chunk] = terms.upper
    return lower, upper


def nearest_rank_quantile(sample: np.ndarray, level: float) -> float:
    """ceil(level * M)-th order statistic of a 1-D sample."""
    sample = np.sort(np.asarray(sample, dtype=float))
    m = sample.shape[0]
    rank = min(m, max(1, int(np.ceil(level * m))))
    return float(sample[rank - 1])


def critical_values(stats: BoundTermStats, level: float = 0.975) -> CriticalValues:
    """Empirical critical values from studentized extrema across draws.

    Per draw, the lower statistic is the max over stochastic lower terms of
    (term - mean) / (std + eps) and the upper statistic is minus the min of
    the studentized upper deviations.  Terms with exactly zero dispersion
    (the constant lower term, or any degenerate term) are excluded rather
    than contributing 0/0.  Critical values are nearest-rank quantiles,
    floored at zero so the correction never tightens.
    """
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    draws_l = stats.draws[:, :4]
    draws_u = stats.draws[:, 4:]
    kappas = []
    for draws, means, stds, sign in (
        (draws_l, stats.means.lower, stats.stds.lower, 1.0),
        (draws_u, stats.means.upper, stats.stds.upper, -1.0),
    ):
        active = stds > 0.0
        if not active.any():
            kappas.append(0.0)
            continue
        dev = (draws[:, active] - means[active]) / (stds[active] + STUDENTIZE_EPS)
        if sign > 0:
            stat = dev.max(axis=1)
        else:
            stat = -dev.min(axis=1)
        kappas.append(max(0.0, nearest_rank_quantile(stat, level)))
    return CriticalValues(kappa_l=kappas[0], kappa_u=kappas[1], quantile_level=level)


def infer_interval(hyper: HyperModel, z, M: int, level: float, seed) -> bounds.PnsInterval:
    """End-to-end corrected interval at one (standardized) covariate row."""
    stats = bound_statistics(hyper, z, M, seed)
    cvals = critical_values(stats, level)
    return bounds.precision_corrected_interval(
        stats.means, stats.stds, cvals.kappa_l, cvals.kappa_u, method="enn_clr"
    )


def infer_intervals_batch(
    hyper: HyperModel, Z, M: int, level: float, seed, draw_chunk: int = 512,
    point_chunk: int = 1024,
) -> dict:
    """Corrected intervals for many rows sharing one set of epistemic draws.

    Sharing the draws keeps the realizations coherent across points and is
    the batched counterpart of per-point inference.  Returns arrays for the
    corrected endpoints, the plug-in-of-means endpoints, per-point critical
    values, crossed flags, and the mean atoms across draws.
    """
    if M < 2:
        raise ValueError("M must be >= 2")
    Z = np.asarray(Z, dtype=float)
    n = Z.shape[0]
    zetas = np.random.default_rng(seed).standard_normal((M, hyper.index_dim))
    result = {
        key: np.empty(n)
        for key in ("lower", "upper", "kappa_l", "kappa_u", "plug_lower", "plug_upper")
    }
    result["crossed"] = np.empty(n, dtype=bool)
    result["plug_crossed"] = np.empty(n, dtype=bool)
    result["mean_atoms"] = np.empty((n, 6))
    for start in range(0, n, point_chunk):
        zc = Z[start : start + point_chunk]
        lower_draws, upper_draws = _term_draws(hyper, zc, zetas, draw_chunk)
        for j in range(zc.shape[0]):
            stats = _term_stats_from_draws(lower_draws[:, j, :], upper_draws[:, j, :])
            cvals = critical_values(stats, level)
            lo, up, crossed = bounds.corrected_envelope(
                stats.means.lower, stats.stds.lower, stats.means.upper,
                stats.stds.upper, cvals.kappa_l, cvals.kappa_u,
            )
            plo, pup, pcrossed = bounds.corrected_envelope(
                stats.means.lower, stats.stds.lower, stats.means.upper,
                stats.stds.upper, 0.0, 0.0,
            )
            i = start + j
            result["lower"][i] = lo
            result["upper"][i] = up
            result["crossed"][i] = crossed
            result["kappa_l"][i] = cvals.kappa_l
            result["kappa_u"][i] = cvals.kappa_u
            result["plug_lower"][i] = plo
            result["plug_upper"][i] = pup
            result["plug_crossed"][i] = pcrossed
        # Mean atoms are feasible because the constraint set is convex.
        mean_atoms = np.zeros((zc.shape[0], 6))
        for s2 in range(0, M, draw_chunk):
            thetas = sample_params_multi(hyper, zetas[s2 : s2 + draw_chunk])
            mean_atoms += forward_atoms_multi(thetas, hyper.base_layout, zc).sum(axis=0)
        result["mean_atoms"][start : start + point_chunk] = mean_atoms / M
    return result


class EpistemicBoundsEstimator(BaseEstimator):
    """Anchored ENN with precision-corrected interval prediction."""

    method_name = "enn_clr"

    def __init__(
        self,
        hidden_width: int = 128,
        depth: int = 3,
        learning_rate: float = 3e-4,
        batch_size: int = 8192,
        epochs: int = 800,
        validation_fraction: float = 0.0,
        standardize: bool = True,
        seed: int = 0,
        index_dim: int = 20,
        generator_hidden=(64, 64),
        prior_hidden=(32, 32),
        prior_scale: float = 1.0,
        index_samples: int = 8,
        posterior_samples: int = 8000,
        quantile_level: float = 0.975,
    ):
        self.hidden_width = hidden_width
        self.depth = depth
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.validation_fraction = validation_fraction
        self.standardize = standardize
        self.seed = seed
        self.index_dim = index_dim
        self.generator_hidden = generator_hidden
        self.prior_hidden = prior_hidden
        self.prior_scale = prior_scale
        self.index_samples = index_samples
        self.posterior_samples = posterior_samples
        self.quantile_level = quantile_level

    def fit(self, Z, treatment, outcome, regime):
        helper = AnchoredBoundsEstimator(
            hidden_width=self.hidden_width, depth=self.depth, standardize=self.standardize
        )
        Z, treatment, outcome, is_exp, scaler = helper._prepare_fit(
            Z, treatment, outcome, regime
        )
        base_layout = anchored_layout(Z.shape[1], self.hidden_width, self.depth)
        ss = np.random.SeedSequence(self.seed)
        hyper_seed, train_seed = ss.spawn(2)
        hyper = init_hypermodel(
            base_layout,
            index_dim=self.index_dim,
            generator_hidden=tuple(self.generator_hidden),
            prior_hidden=tuple(self.prior_hidden),
            prior_scale=self.prior_scale,
            seed=hyper_seed,
        )
        cfg = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            validation_fraction=self.validation_fraction,
            seed=train_seed,
            scaler=scaler,
        )
        self.scaler_ = scaler
        self.hyper_ = train_enn(
            hyper, Z, treatment, outcome, is_exp, cfg, index_samples=self.index_samples
        )
        self.n_features_in_ = Z.shape[1]
        return self

    def _inference_seed(self, seed):
        if seed is not None:
            return seed
        return np.random.SeedSequence((self.seed, 0xE21)).generate_state(1)[0]

    def predict_detail(self, Z, M=None, level=None, seed=None) -> dict:
        check_fitted(self, "hyper_")
        Z = check_covariates(Z, self.n_features_in_)
        return infer_intervals_batch(
            self.hyper_,
            self.scaler_.transform(Z),
            M=M or self.posterior_samples,
            level=level or self.quantile_level,
            seed=self._inference_seed(seed),
        )

    def predict_interval(self, Z, M=None, level=None, seed=None):
        detail = self.predict_detail(Z, M=M, level=level, seed=seed)
        return [
            bounds.PnsInterval(
                lower=float(lo), upper=float(up), crossed=bool(cr),
                method=self.method_name, kappa_lower=float(kl), kappa_upper=float(ku),
            )
            for lo, up, cr, kl, ku in zip(
                detail["lower"], detail["upper"], detail["crossed"],
                detail["kappa_l"], detail["kappa_u"],
            )
        ]

    def predict_atoms(self, Z, M=None, seed=None) -> np.ndarray:
        """Mean atoms across epistemic draws (feasible by convexity)."""
        detail = self.predict_detail(Z, M=M, seed=seed)
        return detail["mean_atoms"]

    def feasibility_audit(self, Z, tol: float = bounds.AUDIT_FEASIBILITY_TOL):
        return bounds.check_feasibility(self.predict_atoms(Z), tol)
