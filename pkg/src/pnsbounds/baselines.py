"""S-learner and T-learner plug-in baselines without constraint coordination.

Both estimate the interventional probabilities with ordinary supervised
networks on the experimental rows (the S-learner appends the treatment as an
input feature; the T-learner trains one network per arm) and the joint
observational probabilities with a separate 4-class network on the
observational rows.  The six estimates are substituted into the envelope
formulas with no constraint enforcement, so the compatibility checks can and
do fail on a fraction of points; that failure rate is exactly what the
percent-valid metric measures.

The backbones reuse the anchored module's architecture and training loop so
that comparisons isolate the effect of anchoring itself.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from . import bounds
from .anchored import PROB_CLIP, AnchoredBoundsEstimator, TrainConfig, joint_class
from .mlp import ParamLayout, chain_backward, chain_forward, mlp_entries, run_training, sigmoid, softmax
from .validation import check_covariates, check_fitted


def head_layout(d_in: int, width: int, depth: int, out_dim: int) -> ParamLayout:
    """Backbone identical to the anchored network plus one linear head."""
    sizes = (d_in,) + (width,) * depth + (width,)
    entries = mlp_entries("bb_", sizes) + (
        ("head_W", (width, out_dim), width),
        ("head_b", (out_dim,), width),
    )
    return ParamLayout(entries=entries)


def _n_chain(layout: ParamLayout) -> int:
    return sum(1 for name in layout.names if name.startswith("bb_W"))


def _head_forward(flat, layout: ParamLayout, Z):
    phi, cache = chain_forward(layout, "bb_", _n_chain(layout), flat, Z)
    logits = phi @ layout.view(flat, "head_W") + layout.view(flat, "head_b")
    return logits, phi, cache


def _head_backward(flat, layout, phi, cache, d_logits):
    grads = np.zeros_like(flat)
    layout.view(grads, "head_W")[...] += phi.T @ d_logits
    layout.view(grads, "head_b")[...] += d_logits.sum(axis=0)
    d_phi = d_logits @ layout.view(flat, "head_W").T
    chain_backward(layout, "bb_", _n_chain(layout), flat, cache, d_phi, grads)
    return grads


def binary_loss_and_grad(flat, layout: ParamLayout, Z, y):
    """Sigmoid binary cross-entropy with the shared clipping convention."""
    y = np.asarray(y, dtype=float)
    n = Z.shape[0]
    logits, phi, cache = _head_forward(flat, layout, Z)
    p = sigmoid(logits[:, 0])
    p_c = np.clip(p, PROB_CLIP, 1.0 - PROB_CLIP)
    loss = float(-(y * np.log(p_c) + (1.0 - y) * np.log(1.0 - p_c)).mean())
    d_p = -y / p_c * (p > PROB_CLIP) + (1.0 - y) / (1.0 - p_c) * (p < 1.0 - PROB_CLIP)
    d_logits = (d_p * p * (1.0 - p) / n)[:, None]
    return loss, _head_backward(flat, layout, phi, cache, d_logits)


def multiclass_loss_and_grad(flat, layout: ParamLayout, Z, cls):
    """Softmax cross-entropy over the four joint outcomes."""
    cls = np.asarray(cls)
    n = Z.shape[0]
    logits, phi, cache = _head_forward(flat, layout, Z)
    p = softmax(logits)
    p_true = p[np.arange(n), cls]
    inside = (p_true > PROB_CLIP) & (p_true < 1.0 - PROB_CLIP)
    loss = float(-np.log(np.clip(p_true, PROB_CLIP, 1.0 - PROB_CLIP)).mean())
    d = p.copy()
    d[np.arange(n), cls] -= 1.0
    d_logits = d * inside[:, None] / n
    return loss, _head_backward(flat, layout, phi, cache, d_logits)


def _train_head_net(layout, loss_grad, n_rows, cfg: TrainConfig, seed) -> np.ndarray:
    ss = np.random.SeedSequence(seed)
    shuffle_seed, init_seed = ss.spawn(2)
    params = layout.init(init_seed)
    run_training(
        params,
        loss_grad,
        n_rows,
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        shuffle_seed=shuffle_seed,
    )
    return params


class _PlugInBase(BaseEstimator):
    """Shared fitting/prediction plumbing for the two plug-in learners."""

    def __init__(
        self,
        hidden_width: int = 128,
        depth: int = 3,
        learning_rate: float = 3e-4,
        batch_size: int = 8192,
        epochs: int = 800,
        standardize: bool = True,
        seed: int = 0,
    ):
        self.hidden_width = hidden_width
        self.depth = depth
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.standardize = standardize
        self.seed = seed

    def _cfg(self, scaler) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            seed=self.seed,
            scaler=scaler,
        )

    def _fit_joint(self, Zs_obs, x_obs, y_obs, seed):
        self.joint_layout_ = head_layout(Zs_obs.shape[1], self.hidden_width, self.depth, 4)
        cls = joint_class(x_obs, y_obs)

        def loss_grad(p, batch):
            return multiclass_loss_and_grad(p, self.joint_layout_, Zs_obs[batch], cls[batch])

        self.joint_params_ = _train_head_net(
            self.joint_layout_, loss_grad, Zs_obs.shape[0], self._cfg(None), seed
        )

    def _joint_probs(self, Zs):
        logits, _, _ = _head_forward(self.joint_params_, self.joint_layout_, Zs)
        return softmax(logits)

    def predict_atoms(self, Z) -> np.ndarray:
        check_fitted(self, "joint_params_")
        Z = check_covariates(Z, self.n_features_in_)
        Zs = self.scaler_.transform(Z)
        mu1, mu0 = self._predict_mu(Zs)
        p = self._joint_probs(Zs)
        return np.stack([mu1, mu0, p[:, 3], p[:, 2], p[:, 1], p[:, 0]], axis=-1)

    def envelope(self, Z):
        return bounds.plug_in_envelope(self.predict_atoms(Z))

    def predict_interval(self, Z) -> list[bounds.PnsInterval]:
        lower, upper, crossed = self.envelope(Z)
        return [
            bounds.PnsInterval(
                lower=float(lo), upper=float(up), crossed=bool(cr),
                method=self.method_name,
            )
            for lo, up, cr in zip(lower, upper, crossed)
        ]

    def feasibility_audit(self, Z, tol: float = bounds.AUDIT_FEASIBILITY_TOL):
        return bounds.check_feasibility(self.predict_atoms(Z), tol)


class SLearnerBounds(_PlugInBase):
    """Single outcome model over (z, x) plus a separate joint model."""

    method_name = "s_learner"

    def fit(self, Z, treatment, outcome, regime):
        helper = AnchoredBoundsEstimator(standardize=self.standardize)
        Z, treatment, outcome, is_exp, scaler = helper._prepare_fit(
            Z, treatment, outcome, regime
        )
        self.scaler_ = scaler
        self.n_features_in_ = Z.shape[1]
        Zs = scaler.transform(Z)
        seeds = np.random.SeedSequence(self.seed).spawn(2)

        exp = is_exp
        Zx = np.hstack([Zs[exp], treatment[exp][:, None].astype(float)])
        self.outcome_layout_ = head_layout(Zx.shape[1], self.hidden_width, self.depth, 1)
        y_exp = outcome[exp]

        def loss_grad(p, batch):
            return binary_loss_and_grad(p, self.outcome_layout_, Zx[batch], y_exp[batch])

        self.outcome_params_ = _train_head_net(
            self.outcome_layout_, loss_grad, Zx.shape[0], self._cfg(None), seeds[0]
        )
        self._fit_joint(Zs[~exp], treatment[~exp], outcome[~exp], seeds[1])
        return self

    def _predict_mu(self, Zs):
        mus = []
        for arm in (1, 0):
            Zx = np.hstack([Zs, np.full((Zs.shape[0], 1), float(arm))])
            logits, _, _ = _head_forward(self.outcome_params_, self.outcome_layout_, Zx)
            mus.append(sigmoid(logits[:, 0]))
        return mus[0], mus[1]


class TLearnerBounds(_PlugInBase):
    """Separate outcome models per treatment arm plus a joint model."""

    method_name = "t_learner"

    def fit(self, Z, treatment, outcome, regime):
        helper = AnchoredBoundsEstimator(standardize=self.standardize)
        Z, treatment, outcome, is_exp, scaler = helper._prepare_fit(
            Z, treatment, outcome, regime
        )
        self.scaler_ = scaler
        self.n_features_in_ = Z.shape[1]
        Zs = scaler.transform(Z)
        seeds = np.random.SeedSequence(self.seed).spawn(3)

        self.arm_layout_ = head_layout(Zs.shape[1], self.hidden_width, self.depth, 1)
        self.arm_params_ = {}
        for arm in (0, 1):
            sel = is_exp & (treatment == arm)
            if not sel.any():
                raise ValueError(f"no experimental rows with treatment {arm}")
            Za, ya = Zs[sel], outcome[sel]

            def loss_grad(p, batch, Za=Za, ya=ya):
                return binary_loss_and_grad(p, self.arm_layout_, Za[batch], ya[batch])

            self.arm_params_[arm] = _train_head_net(
                self.arm_layout_, loss_grad, Za.shape[0], self._cfg(None), seeds[arm]
            )
        self._fit_joint(Zs[~is_exp], treatment[~is_exp], outcome[~is_exp], seeds[2])
        return self

    def _predict_mu(self, Zs):
        out = {}
        for arm in (0, 1):
            logits, _, _ = _head_forward(self.arm_params_[arm], self.arm_layout_, Zs)
            out[arm] = sigmoid(logits[:, 0])
        return out[1], out[0]


def plug_in_predict(model, Z, tol: float = bounds.AUDIT_FEASIBILITY_TOL):
    """Plug-in intervals plus a per-point feasibility flag for the raw atoms.

    Works for any estimator exposing predict_atoms; infeasible atoms flow
    through the envelope unrepaired (possibly producing crossed intervals)
    and are flagged for the percent-valid metric.
    """
    atoms = model.predict_atoms(Z)
    lower, upper, crossed = bounds.plug_in_envelope(atoms)
    feasible = bounds.check_feasibility(atoms, tol)
    intervals = [
        bounds.PnsInterval(
            lower=float(lo), upper=float(up), crossed=bool(cr),
            method=getattr(model, "method_name", "plug_in"),
        )
        for lo, up, cr in zip(lower, upper, crossed)
    ]
    return intervals, feasible
