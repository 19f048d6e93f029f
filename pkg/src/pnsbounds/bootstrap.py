"""Multiplier-bootstrap inference with influence functions for the envelope.

The frequentist baseline: standard errors for the eight envelope terms come
from plug-in influence functions

    psi_j(W_i; z) = grad_theta g_j(z)' (H + lambda I)^{-1} grad_theta l(W_i),

where l is the per-sample training loss (with its gradient-blocking, since
those are the estimating equations the optimizer actually solved), H is the
Hessian of the empirical loss over the differentiated parameter subset, and
the bound-term Jacobians grad g_j(z) are taken with blocking disabled so the
full dependence of the terms on both heads is captured.  In last-layer mode
the subset is the three head layers; full-network mode (gated to tiny
models) differentiates everything.

Critical values reweight per-sample influence contributions with standard
normal multipliers and take per-side maxima of absolute studentized sums,
at level 1 - alpha/2 each (Bonferroni split across the two sides).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from . import bounds
from .anchored import (
    LAST_LAYER_NAMES,
    PROB_CLIP,
    AnchoredBoundsEstimator,
    TrainConfig,
    anchored_layout,
    anchored_loss_and_grad,
    forward,
    forward_atoms,
    joint_class,
    term_gradients,
    train,
)
from .epinet import CriticalValues, nearest_rank_quantile
from .mlp import ParamLayout
from .validation import check_covariates, check_fitted

#: Explicit Hessian formation is used up to this many restricted parameters.
EXPLICIT_HESSIAN_MAX = 2000

#: Full-network mode refuses models larger than this (memory wall).
FULL_NETWORK_MAX = 20000

_MULTIPLIER_CHUNK = 128


def cg_solve(matvec, b, max_iters: int, tol: float = 0.0):
    """Conjugate gradients for SPD systems; returns (x, residual_norm).

    Runs a fixed iteration budget (unless the residual hits ``tol``) and
    reports the final residual norm rather than failing, matching
    fixed-iteration practice.
    """
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    for _ in range(max_iters):
        if np.sqrt(rs) <= tol or rs == 0.0:
            break
        Ap = matvec(p)
        denom = float(p @ Ap)
        if denom <= 0.0:
            break  # numerical loss of positive definiteness
        alpha = rs / denom
        x += alpha * p
        r -= alpha * Ap
        rs_new = float(r @ r)
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, float(np.sqrt(rs))


@dataclass
class InfluenceCache:
    """Per-sample influence values for the eight envelope terms at one point.

    ``psi`` has shape (8, n): rows 0..3 the lower terms, 4..7 the upper
    terms.  ``residuals`` records the final CG residual norm per solve.
    """

    psi: np.ndarray
    mode: str
    damping: float
    cg_iters: int
    residuals: np.ndarray
    param_indices: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.psi.shape[1]

    def term_standard_errors(self) -> np.ndarray:
        """s_j = RMS of per-sample influence values, scaled by 1/sqrt(n)."""
        n = self.n_samples
        return np.sqrt(np.mean(self.psi**2, axis=1)) / np.sqrt(n)


def _exp_loss_derivatives(mu, widths, sig, y):
    """First and second delta-derivatives of the blocked experimental loss."""
    inside = (mu > PROB_CLIP) & (mu < 1.0 - PROB_CLIP)
    mu_c = np.clip(mu, PROB_CLIP, 1.0 - PROB_CLIP)
    g1 = inside * (-y / mu_c + (1 - y) / (1.0 - mu_c))
    g2 = inside * (y / mu_c**2 + (1 - y) / (1.0 - mu_c) ** 2)
    d1 = widths * sig * (1.0 - sig)
    d2 = widths * sig * (1.0 - sig) * (1.0 - 2.0 * sig)
    return g1 * d1, g2 * d1**2 + g1 * d2  # dl/ddelta, d2l/ddelta2


def last_layer_scores(flat, layout: ParamLayout, Z, x, y, is_exp) -> np.ndarray:
    """Per-sample gradients of the training loss over the head parameters.

    Sample i is weighted by n/n_regime so that the mean over rows equals the
    gradient of the empirical loss L_obs + L_exp (hence approximately zero
    at the trained optimum).  Column order follows the layout: joint_W,
    joint_b, aux_W, aux_b.
    """
    Z = np.asarray(Z, dtype=float)
    x = np.asarray(x)
    y = np.asarray(y)
    is_exp = np.asarray(is_exp, dtype=bool)
    n = Z.shape[0]
    w = layout.shape("aux_W")[0]
    out = forward(flat, layout, Z)
    G = np.zeros((n, 4 * w + 4 + 2 * w + 2))

    obs = np.flatnonzero(~is_exp)
    if obs.size:
        cls = joint_class(x[obs], y[obs])
        p = out.probs[obs]
        inside = (p[np.arange(obs.size), cls] > PROB_CLIP) & (
            p[np.arange(obs.size), cls] < 1.0 - PROB_CLIP
        )
        d_logits = p.copy()
        d_logits[np.arange(obs.size), cls] -= 1.0
        d_logits *= (inside * (n / obs.size))[:, None]
        G[obs, : 4 * w] = (out.phi[obs, :, None] * d_logits[:, None, :]).reshape(
            obs.size, 4 * w
        )
        G[obs, 4 * w : 4 * w + 4] = d_logits

    expi = np.flatnonzero(is_exp)
    if expi.size:
        xe = x[expi]
        mu = np.where(xe == 1, out.atoms[expi, 0], out.atoms[expi, 1])
        dl, _ = _exp_loss_derivatives(
            mu, out.widths[expi, xe], out.sig[expi, xe], y[expi]
        )
        d_deltas = np.zeros((expi.size, 2))
        d_deltas[np.arange(expi.size), xe] = dl * (n / expi.size)
        base = 4 * w + 4
        G[expi, base : base + 2 * w] = (
            out.phi[expi, :, None] * d_deltas[:, None, :]
        ).reshape(expi.size, 2 * w)
        G[expi, base + 2 * w :] = d_deltas
    return G


def last_layer_hessian(flat, layout: ParamLayout, Z, x, y, is_exp) -> np.ndarray:
    """Exact Hessian of the empirical training loss over the head parameters.

    Block-diagonal: the blocked experimental loss never touches the joint
    head, and the observational loss never touches the scalar heads.
    """
    Z = np.asarray(Z, dtype=float)
    x = np.asarray(x)
    y = np.asarray(y)
    is_exp = np.asarray(is_exp, dtype=bool)
    w = layout.shape("aux_W")[0]
    p_r = 4 * w + 4 + 2 * w + 2
    H = np.zeros((p_r, p_r))
    out = forward(flat, layout, Z)

    obs = np.flatnonzero(~is_exp)
    if obs.size:
        cls = joint_class(x[obs], y[obs])
        p = out.probs[obs]
        inside = (p[np.arange(obs.size), cls] > PROB_CLIP) & (
            p[np.arange(obs.size), cls] < 1.0 - PROB_CLIP
        )
        S = (np.einsum("ni,ij->nij", p, np.eye(4)) - np.einsum("ni,nj->nij", p, p))
        S *= inside[:, None, None]
        phi1 = np.hstack([out.phi[obs], np.ones((obs.size, 1))])
        # vec order (a*4 + i) matches joint_W row-major followed by joint_b
        Hj = np.einsum("na,nb,nij->aibj", phi1, phi1, S) / obs.size
        H[: 4 * w + 4, : 4 * w + 4] = Hj.reshape(4 * (w + 1), 4 * (w + 1))

    expi = np.flatnonzero(is_exp)
    if expi.size:
        xe = x[expi]
        mu = np.where(xe == 1, out.atoms[expi, 0], out.atoms[expi, 1])
        _, d2 = _exp_loss_derivatives(
            mu, out.widths[expi, xe], out.sig[expi, xe], y[expi]
        )
        phi1 = np.hstack([out.phi[expi], np.ones((expi.size, 1))])
        base = 4 * w + 4
        for head in (0, 1):
            sel = xe == head
            if not sel.any():
                continue
            block = np.einsum(
                "n,na,nb->ab", d2[sel], phi1[sel], phi1[sel]
            ) / expi.size
            idx = np.concatenate(
                [base + np.arange(w) * 2 + head, [base + 2 * w + head]]
            )
            H[np.ix_(idx, idx)] += block
    return H


def full_network_scores(flat, layout: ParamLayout, Z, x, y, is_exp) -> np.ndarray:
    """Per-sample full-parameter gradients (tiny-model mode only)."""
    Z = np.asarray(Z, dtype=float)
    n = Z.shape[0]
    x = np.asarray(x)
    y = np.asarray(y)
    is_exp = np.asarray(is_exp, dtype=bool)
    n_obs = int((~is_exp).sum())
    n_exp = int(is_exp.sum())
    G = np.empty((n, layout.size))
    for i in range(n):
        _, g = anchored_loss_and_grad(
            flat, layout, Z[i : i + 1], x[i : i + 1], y[i : i + 1], is_exp[i : i + 1]
        )
        weight = n / n_exp if is_exp[i] else n / n_obs
        G[i] = g * weight
    return G


def _numerical_hvp(grad_fn, theta, v, eps_scale: float = 1e-5):
    """Central-difference Hessian-vector product of an analytic gradient."""
    norm = np.linalg.norm(v)
    if norm == 0.0:
        return np.zeros_like(v)
    eps = eps_scale / norm
    return (grad_fn(theta + eps * v) - grad_fn(theta - eps * v)) / (2.0 * eps)


def full_network_hessian(flat, layout: ParamLayout, Z, x, y, is_exp) -> np.ndarray:
    """Explicit full-parameter Hessian via numerical HVPs on unit vectors.

    One-time cost of 2p full-batch gradient evaluations; intended for the
    tiny models the full-network mode is gated to.  The result is
    symmetrized to absorb finite-difference noise.
    """
    flat = np.asarray(flat, dtype=float)
    Z = np.asarray(Z, dtype=float)
    x, y, is_exp = np.asarray(x), np.asarray(y), np.asarray(is_exp, dtype=bool)

    def grad_fn(theta):
        _, g = anchored_loss_and_grad(theta, layout, Z, x, y, is_exp)
        return g

    p = layout.size
    H = np.empty((p, p))
    e = np.zeros(p)
    for j in range(p):
        e[j] = 1.0
        H[:, j] = _numerical_hvp(grad_fn, flat, e)
        e[j] = 0.0
    return 0.5 * (H + H.T)


def influence_functions(
    flat,
    layout: ParamLayout,
    Z,
    x,
    y,
    is_exp,
    z_query,
    mode: str = "last_layer",
    damping: float = 1e-4,
    cg_iters: int = 50,
    scores: np.ndarray | None = None,
    hessian: np.ndarray | None = None,
) -> InfluenceCache:
    """Influence values of every training sample on the 8 terms at z_query.

    ``scores`` and ``hessian`` may be passed in when precomputed (they do
    not depend on the query point).  The Hessian is formed explicitly up to
    ``EXPLICIT_HESSIAN_MAX`` restricted parameters, otherwise it is accessed
    matrix-free through numerical Hessian-vector products on the analytic
    gradient.
    """
    flat = np.asarray(flat, dtype=float)
    if mode == "last_layer":
        idx = layout.indices(LAST_LAYER_NAMES)
        if scores is None:
            scores = last_layer_scores(flat, layout, Z, x, y, is_exp)
    elif mode == "full_network":
        if layout.size > FULL_NETWORK_MAX:
            raise ValueError(
                f"full_network mode gated to <= {FULL_NETWORK_MAX} parameters, "
                f"model has {layout.size}"
            )
        idx = layout.indices(layout.names)
        if scores is None:
            scores = full_network_scores(flat, layout, Z, x, y, is_exp)
    else:
        raise ValueError(f"unknown influence mode {mode!r}")

    p_r = idx.size
    if hessian is None and p_r <= EXPLICIT_HESSIAN_MAX and mode == "last_layer":
        hessian = last_layer_hessian(flat, layout, Z, x, y, is_exp)
    if hessian is not None:
        matvec = lambda v: hessian @ v + damping * v
    else:
        Zf = np.asarray(Z, dtype=float)
        xf, yf, ef = np.asarray(x), np.asarray(y), np.asarray(is_exp, dtype=bool)

        def grad_restricted(theta_r):
            theta = flat.copy()
            theta[idx] = theta_r
            _, g = anchored_loss_and_grad(theta, layout, Zf, xf, yf, ef)
            return g[idx]

        base = flat[idx]
        matvec = lambda v: _numerical_hvp(grad_restricted, base, v) + damping * v

    lower_jac, upper_jac = term_gradients(flat, layout, z_query, idx)
    g_jac = np.vstack([lower_jac, upper_jac])
    psi = np.empty((8, scores.shape[0]))
    residuals = np.empty(8)
    for j in range(8):
        u, resid = cg_solve(matvec, g_jac[j], cg_iters)
        residuals[j] = resid
        psi[j] = scores @ u
    return InfluenceCache(
        psi=psi,
        mode=mode,
        damping=damping,
        cg_iters=cg_iters,
        residuals=residuals,
        param_indices=idx,
    )


def mb_critical_values(
    cache: InfluenceCache, B: int = 1000, alpha: float = 0.05, seed=0
) -> CriticalValues:
    """Gaussian-multiplier critical values for the two envelope sides.

    Each replicate draws xi ~ N(0, I_n) and evaluates, per side, the max of
    |xi' psi_j| / (sqrt(n) s_hat_j) over that side's non-degenerate terms;
    kappa is the nearest-rank (1 - alpha/2) quantile of the B maxima
    (Bonferroni split of alpha across the sides).  Terms whose influence is
    identically zero (e.g. the constant lower term) are excluded.
    """
    if B < 100:
        raise ValueError("B must be >= 100")
    n = cache.n_samples
    rms = np.sqrt(np.mean(cache.psi**2, axis=1))
    active = rms > 0.0
    stats = {"lower": [], "upper": []}
    sides = {"lower": np.arange(4), "upper": np.arange(4, 8)}
    rng = np.random.default_rng(seed)
    for start in range(0, B, _MULTIPLIER_CHUNK):
        b = min(_MULTIPLIER_CHUNK, B - start)
        xi = rng.standard_normal((b, n))
        tstat = np.abs(xi @ cache.psi.T) / (np.sqrt(n) * rms + 1e-300)
        for side, cols in sides.items():
            live = cols[active[cols]]
            if live.size:
                stats[side].append(tstat[:, live].max(axis=1))
    level = 1.0 - alpha / 2.0
    kappas = {}
    for side in sides:
        if stats[side]:
            sample = np.concatenate(stats[side])
            kappas[side] = max(0.0, nearest_rank_quantile(sample, level))
        else:
            kappas[side] = 0.0
    return CriticalValues(
        kappa_l=kappas["lower"], kappa_u=kappas["upper"], quantile_level=level
    )


def mb_interval(
    flat, layout: ParamLayout, z_query, cache: InfluenceCache, cvals: CriticalValues
) -> bounds.PnsInterval:
    """Precision-corrected interval from influence-based standard errors."""
    atoms = forward(flat, layout, np.asarray(z_query, dtype=float).reshape(1, -1)).atoms[0]
    terms = bounds.bound_terms(atoms)
    se = cache.term_standard_errors()
    stds = bounds.BoundTerms(lower=se[:4], upper=se[4:])
    return bounds.precision_corrected_interval(
        terms, stds, cvals.kappa_l, cvals.kappa_u, method=f"mb_{cache.mode}"
    )


class MultiplierBootstrapBounds(BaseEstimator):
    """Anchored network + multiplier-bootstrap corrected intervals.

    Fits the anchored base model, caches the per-sample scores and the
    restricted Hessian once (they are query-independent), then per test
    point solves the damped systems for the term Jacobians and calibrates
    critical values from B multiplier replicates.
    """

    def __init__(
        self,
        mode: str = "last_layer",
        n_bootstrap: int = 1000,
        alpha: float = 0.05,
        cg_iters: int = 50,
        damping: float = 1e-4,
        hidden_width: int = 128,
        depth: int = 3,
        learning_rate: float = 1e-3,
        batch_size: int = 256,
        epochs: int = 100,
        validation_fraction: float = 0.1,
        standardize: bool = True,
        seed: int = 0,
    ):
        self.mode = mode
        self.n_bootstrap = n_bootstrap
        self.alpha = alpha
        self.cg_iters = cg_iters
        self.damping = damping
        self.hidden_width = hidden_width
        self.depth = depth
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.validation_fraction = validation_fraction
        self.standardize = standardize
        self.seed = seed

    @property
    def method_name(self) -> str:
        return f"mb_{self.mode}"

    def fit(self, Z, treatment, outcome, regime):
        helper = AnchoredBoundsEstimator(
            hidden_width=self.hidden_width, depth=self.depth, standardize=self.standardize
        )
        Z, treatment, outcome, is_exp, scaler = helper._prepare_fit(
            Z, treatment, outcome, regime
        )
        self.layout_ = anchored_layout(Z.shape[1], self.hidden_width, self.depth)
        cfg = TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            validation_fraction=self.validation_fraction,
            seed=self.seed,
            scaler=scaler,
        )
        self.params_, self.history_ = train(
            self.layout_, Z, treatment, outcome, is_exp, cfg
        )
        self.scaler_ = scaler
        self.n_features_in_ = Z.shape[1]
        self._build_influence_inputs(scaler.transform(Z), treatment, outcome, is_exp)
        return self

    def _build_influence_inputs(self, Zs, treatment, outcome, is_exp):
        self._train_data_ = (Zs, treatment, outcome, is_exp)
        if self.mode == "last_layer":
            self._scores_ = last_layer_scores(
                self.params_, self.layout_, Zs, treatment, outcome, is_exp
            )
            self._hessian_ = last_layer_hessian(
                self.params_, self.layout_, Zs, treatment, outcome, is_exp
            )
        else:
            if self.layout_.size > FULL_NETWORK_MAX:
                raise ValueError(
                    f"full_network mode gated to <= {FULL_NETWORK_MAX} parameters, "
                    f"model has {self.layout_.size}"
                )
            self._scores_ = full_network_scores(
                self.params_, self.layout_, Zs, treatment, outcome, is_exp
            )
            self._hessian_ = None
            if self.layout_.size <= EXPLICIT_HESSIAN_MAX:
                self._hessian_ = full_network_hessian(
                    self.params_, self.layout_, Zs, treatment, outcome, is_exp
                )

    def refit_influence(self, Z, treatment, outcome, regime):
        """Rebuild the query-independent influence inputs from training data.

        Needed after loading from a checkpoint, which carries only the base
        network parameters.
        """
        check_fitted(self, "params_")
        from .validation import check_binary, check_regime

        Z = check_covariates(Z, self.n_features_in_)
        treatment = check_binary(treatment, "treatment")
        outcome = check_binary(outcome, "outcome")
        is_exp = check_regime(regime)
        self._build_influence_inputs(
            self.scaler_.transform(Z), treatment, outcome, is_exp
        )
        return self

    def influence_at(self, z_row) -> InfluenceCache:
        check_fitted(self, "params_")
        Zs, treatment, outcome, is_exp = self._train_data_
        return influence_functions(
            self.params_,
            self.layout_,
            Zs,
            treatment,
            outcome,
            is_exp,
            z_row,
            mode=self.mode,
            damping=self.damping,
            cg_iters=self.cg_iters,
            scores=self._scores_,
            hessian=self._hessian_,
        )

    def predict_interval(self, Z, seed=None) -> list[bounds.PnsInterval]:
        check_fitted(self, "params_")
        Z = check_covariates(Z, self.n_features_in_)
        Zs = self.scaler_.transform(Z)
        master = self.seed if seed is None else seed
        intervals = []
        for i in range(Zs.shape[0]):
            cache = self.influence_at(Zs[i])
            point_seed = np.random.SeedSequence((master, i)).generate_state(1)[0]
            cvals = mb_critical_values(
                cache, B=self.n_bootstrap, alpha=self.alpha, seed=point_seed
            )
            intervals.append(mb_interval(self.params_, self.layout_, Zs[i], cache, cvals))
        return intervals

    def predict_detail(self, Z, seed=None) -> dict:
        """Array form of predict_interval plus the plug-in-of-means endpoints."""
        intervals = self.predict_interval(Z, seed=seed)
        plug_lower, plug_upper, plug_crossed = bounds.plug_in_envelope(
            self.predict_atoms(Z)
        )
        return {
            "lower": np.array([iv.lower for iv in intervals]),
            "upper": np.array([iv.upper for iv in intervals]),
            "crossed": np.array([iv.crossed for iv in intervals]),
            "kappa_l": np.array([iv.kappa_lower for iv in intervals]),
            "kappa_u": np.array([iv.kappa_upper for iv in intervals]),
            "plug_lower": plug_lower,
            "plug_upper": plug_upper,
            "plug_crossed": plug_crossed,
            "mean_atoms": self.predict_atoms(Z),
        }

    def predict_atoms(self, Z) -> np.ndarray:
        check_fitted(self, "params_")
        Z = check_covariates(Z, self.n_features_in_)
        return forward_atoms(self.params_, self.layout_, self.scaler_.transform(Z))

    def feasibility_audit(self, Z, tol: float = bounds.AUDIT_FEASIBILITY_TOL):
        return bounds.check_feasibility(self.predict_atoms(Z), tol)
