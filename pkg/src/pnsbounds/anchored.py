"""Anchored constrained multi-head network for the six atom probabilities.

A shared ReLU backbone feeds three heads: a softmax head over the four joint
outcomes (x, y), which acts as the anchor, and two scalar heads whose
outputs are squashed into the feasible interval implied by the joint
probabilities:

    mu0 = p01 + (1 - p00 - p01) * sigmoid(delta0)
    mu1 = p11 + (1 - p10 - p11) * sigmoid(delta1)

Because sigmoid maps into (0, 1), the compatibility constraints hold for
any parameter values; that is the module's defining property and is what
the feasibility property tests pin down.

Training splits the loss by regime: a 4-class cross-entropy on
observational rows drives the joint head, a binary cross-entropy on
experimental rows drives the interventional heads.  The experimental loss
treats the joint probabilities entering the feasible-interval endpoints as
constants (gradient blocking), so it updates only the scalar heads and the
backbone through them.  All gradients are hand-derived reverse mode; see
:mod:`pnsbounds.mlp` for the primitives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator

from . import bounds
from .mlp import (
    ParamLayout,
    chain_backward,
    chain_forward,
    mlp_entries,
    run_training,
    sigmoid,
    softmax,
)
from .validation import (
    Standardizer,
    check_binary,
    check_consistent_length,
    check_covariates,
    check_fitted,
    check_regime,
)

#: Probabilities are clipped to [PROB_CLIP, 1 - PROB_CLIP] before logs.
PROB_CLIP = 1e-10

#: Joint-outcome class index for (x, y); softmax columns are (p00, p01, p10, p11).
def joint_class(x, y):
    return 2 * np.asarray(x) + np.asarray(y)


LAST_LAYER_NAMES = ("joint_W", "joint_b", "aux_W", "aux_b")


def anchored_layout(d_in: int, width: int, depth: int = 3) -> ParamLayout:
    """Parameter layout: depth hidden ReLU layers, a linear embedding layer,
    the joint softmax head and the two stacked scalar heads."""
    sizes = (d_in,) + (width,) * depth + (width,)
    entries = mlp_entries("bb_", sizes) + (
        ("joint_W", (width, 4), width),
        ("joint_b", (4,), width),
        ("aux_W", (width, 2), width),
        ("aux_b", (2,), width),
    )
    return ParamLayout(entries=entries)


def _n_chain_layers(layout: ParamLayout) -> int:
    return sum(1 for name in layout.names if name.startswith("bb_W"))


@dataclass
class ForwardOutput:
    """All head outputs for a batch (draw axis squeezed when absent)."""

    atoms: np.ndarray
    probs: np.ndarray
    logits: np.ndarray
    deltas: np.ndarray
    sig: np.ndarray
    widths: np.ndarray
    phi: np.ndarray
    cache: dict = field(repr=False, default=None)


def interventional_from_joint(probs, deltas):
    """Map joint probabilities and head scalars to (mu0, mu1) and widths.

    Feasible-interval widths are floored at zero so a degenerate interval
    pins the output to its endpoint.
    """
    probs = np.asarray(probs, dtype=float)
    s = sigmoid(deltas)
    width0 = np.maximum(1.0 - probs[..., 0] - probs[..., 1], 0.0)
    width1 = np.maximum(1.0 - probs[..., 2] - probs[..., 3], 0.0)
    mu0 = probs[..., 1] + width0 * s[..., 0]
    mu1 = probs[..., 3] + width1 * s[..., 1]
    return mu0, mu1, s, np.stack([width0, width1], axis=-1)


def _forward_core(layout: ParamLayout, flat: np.ndarray, Z: np.ndarray) -> ForwardOutput:
    n_layers = _n_chain_layers(layout)
    phi, cache = chain_forward(layout, "bb_", n_layers, flat, Z)
    params = flat if flat.ndim == 2 else flat[None, :]
    phi_m = phi if phi.ndim == 3 else phi[None, ...]
    joint_W = layout.view(params, "joint_W")
    joint_b = layout.view(params, "joint_b")
    aux_W = layout.view(params, "aux_W")
    aux_b = layout.view(params, "aux_b")
    logits = np.matmul(phi_m, joint_W) + joint_b[:, None, :]
    probs = softmax(logits)
    deltas = np.matmul(phi_m, aux_W) + aux_b[:, None, :]
    mu0, mu1, s, widths = interventional_from_joint(probs, deltas)
    atoms = np.stack(
        [mu1, mu0, probs[..., 3], probs[..., 2], probs[..., 1], probs[..., 0]],
        axis=-1,
    )
    if not np.all(np.isfinite(atoms)):
        raise FloatingPointError("non-finite activations in anchored forward pass")
    out = ForwardOutput(
        atoms=atoms, probs=probs, logits=logits, deltas=deltas, sig=s,
        widths=widths, phi=phi_m, cache=cache,
    )
    if flat.ndim == 1:
        for name in ("atoms", "probs", "logits", "deltas", "sig", "widths", "phi"):
            setattr(out, name, getattr(out, name)[0])
    return out


def forward(flat: np.ndarray, layout: ParamLayout, Z) -> ForwardOutput:
    """Forward pass for one parameter vector on a batch of covariate rows."""
    Z = np.asarray(Z, dtype=float)
    d_in = layout.shape("bb_W0")[0]
    if Z.ndim == 1:
        Z = Z[None, :]
    if Z.shape[1] != d_in:
        raise ValueError(f"expected {d_in} input features, got {Z.shape[1]}")
    return _forward_core(layout, np.asarray(flat, dtype=float), Z)


def forward_atoms(flat, layout: ParamLayout, Z) -> np.ndarray:
    return forward(flat, layout, Z).atoms


def forward_atoms_multi(params_matrix, layout: ParamLayout, Z) -> np.ndarray:
    """Atoms for a stack of parameter vectors on shared rows, (m, n, 6)."""
    params_matrix = np.asarray(params_matrix, dtype=float)
    if params_matrix.ndim != 2:
        raise ValueError("params_matrix must be 2-D (draws, size)")
    return _forward_core(layout, params_matrix, np.asarray(Z, dtype=float)).atoms


def _backward_from_heads(layout, flat, out: ForwardOutput, d_logits, d_deltas):
    """Reverse from head inputs to a flat gradient vector."""
    params = flat if flat.ndim == 2 else flat[None, :]
    multi = flat.ndim == 2
    grads = np.zeros_like(params)
    phi = out.phi if multi else out.phi[None, ...]
    d_logits = d_logits if multi else d_logits[None, ...]
    d_deltas = d_deltas if multi else d_deltas[None, ...]
    joint_W = layout.view(params, "joint_W")
    aux_W = layout.view(params, "aux_W")
    layout.view(grads, "joint_W")[...] += np.matmul(phi.transpose(0, 2, 1), d_logits)
    layout.view(grads, "joint_b")[...] += d_logits.sum(axis=1)
    layout.view(grads, "aux_W")[...] += np.matmul(phi.transpose(0, 2, 1), d_deltas)
    layout.view(grads, "aux_b")[...] += d_deltas.sum(axis=1)
    d_phi = np.matmul(d_logits, joint_W.transpose(0, 2, 1)) + np.matmul(
        d_deltas, aux_W.transpose(0, 2, 1)
    )
    chain_backward(layout, "bb_", _n_chain_layers(layout), flat, out.cache,
                   d_phi if multi else d_phi[0], grads)
    return grads if multi else grads[0]


def _softmax_vjp(probs, v):
    """Jacobian-transpose product of softmax: dL/dlogits from dL/dprobs."""
    inner = np.sum(v * probs, axis=-1, keepdims=True)
    return probs * (v - inner)


def _loss_and_grad_core(flat, layout: ParamLayout, Z, x, y, is_exp):
    """Split loss and gradient; vectorizes over an optional draws axis.

    For a (m, P) parameter stack the same batch is evaluated under every
    draw and per-draw losses/gradients are returned, shapes (m,) and (m, P).
    """
    Z = np.asarray(Z, dtype=float)
    x = np.asarray(x)
    y = np.asarray(y)
    is_exp = np.asarray(is_exp, dtype=bool)
    n = Z.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    flat = np.asarray(flat, dtype=float)
    multi = flat.ndim == 2
    out = forward(flat, layout, Z)
    probs = out.probs if multi else out.probs[None, ...]
    atoms = out.atoms if multi else out.atoms[None, ...]
    widths = out.widths if multi else out.widths[None, ...]
    sig = out.sig if multi else out.sig[None, ...]
    m = probs.shape[0]
    d_logits = np.zeros((m, n, 4))
    d_deltas = np.zeros((m, n, 2))
    losses = np.zeros(m)

    obs = ~is_exp
    n_obs = int(obs.sum())
    if n_obs:
        cls = joint_class(x[obs], y[obs])
        p_true = probs[:, obs, :][:, np.arange(n_obs), cls]
        inside = (p_true > PROB_CLIP) & (p_true < 1.0 - PROB_CLIP)
        losses += -np.log(np.clip(p_true, PROB_CLIP, 1.0 - PROB_CLIP)).mean(axis=1)
        d = probs[:, obs, :].copy()
        d[:, np.arange(n_obs), cls] -= 1.0
        d_logits[:, obs, :] = d * inside[..., None] / n_obs

    n_exp = int(is_exp.sum())
    if n_exp:
        xe = x[is_exp]
        ye = y[is_exp]
        rows = np.flatnonzero(is_exp)
        mu = np.where(xe == 1, atoms[:, rows, 0], atoms[:, rows, 1])
        w_sel = widths[:, rows, :][:, np.arange(n_exp), xe]
        s_sel = sig[:, rows, :][:, np.arange(n_exp), xe]
        mu_c = np.clip(mu, PROB_CLIP, 1.0 - PROB_CLIP)
        losses += -(ye * np.log(mu_c) + (1 - ye) * np.log(1.0 - mu_c)).mean(axis=1)
        inside = (mu > PROB_CLIP) & (mu < 1.0 - PROB_CLIP)
        d_mu = inside * (-ye / mu_c + (1 - ye) / (1.0 - mu_c))
        d_delta = d_mu * w_sel * s_sel * (1.0 - s_sel) / n_exp
        d_deltas[:, rows, xe] = d_delta

    if multi:
        grads = _backward_from_heads(layout, flat, out, d_logits, d_deltas)
        return losses, grads
    grad = _backward_from_heads(layout, flat, out, d_logits[0], d_deltas[0])
    return float(losses[0]), grad


def anchored_loss_and_grad(flat, layout: ParamLayout, Z, x, y, is_exp):
    """Total split loss and its gradient on a mixed-regime batch.

    Observational rows contribute a 4-class cross-entropy over (x, y);
    experimental rows contribute a binary cross-entropy against mu_{x_i}.
    The experimental part is gradient-blocked through the joint head: the
    anchor and interval width are treated as constants, so only the scalar
    heads (and the backbone through them) receive its gradient.  Each
    regime's term averages over that regime's rows in the batch.
    """
    flat = np.asarray(flat, dtype=float)
    if flat.ndim != 1:
        raise ValueError("anchored_loss_and_grad takes one parameter vector")
    return _loss_and_grad_core(flat, layout, Z, x, y, is_exp)


def atom_gradients(flat, layout: ParamLayout, z_row, param_indices=None):
    """Full (unblocked) Jacobian of the six atoms at one covariate row.

    Returns an array (6, p) in atom order (mu1, mu0, p11, p10, p01, p00).
    Unlike the training loss, the interventional outputs here are
    differentiated through the anchor and interval width as well, so the
    joint head receives contributions from mu0 and mu1.  ``param_indices``
    restricts the output columns (e.g. to the last-layer parameters).
    """
    flat = np.asarray(flat, dtype=float)
    z_row = np.asarray(z_row, dtype=float).reshape(1, -1)
    jac = np.zeros((6, flat.size))
    for a in range(6):
        out = forward(flat, layout, z_row)
        p = out.probs[0]
        s = out.sig[0]
        widths = out.widths[0]
        dv_probs = np.zeros(4)
        d_deltas = np.zeros((1, 2))
        if a == 0:  # mu1 = p11 + width1 * s1
            if widths[1] > 0.0:
                dv_probs[2] = -s[1]
                dv_probs[3] = 1.0 - s[1]
            else:
                dv_probs[3] = 1.0
            d_deltas[0, 1] = widths[1] * s[1] * (1.0 - s[1])
        elif a == 1:  # mu0 = p01 + width0 * s0
            if widths[0] > 0.0:
                dv_probs[0] = -s[0]
                dv_probs[1] = 1.0 - s[0]
            else:
                dv_probs[1] = 1.0
            d_deltas[0, 0] = widths[0] * s[0] * (1.0 - s[0])
        else:  # p11, p10, p01, p00 at softmax columns 3, 2, 1, 0
            dv_probs[(3, 2, 1, 0)[a - 2]] = 1.0
        d_logits = _softmax_vjp(p[None, :], dv_probs[None, :])
        jac[a] = _backward_from_heads(layout, flat, out, d_logits, d_deltas)
    if param_indices is not None:
        jac = jac[:, param_indices]
    return jac


def term_gradients(flat, layout: ParamLayout, z_row, param_indices=None):
    """Jacobians of the four lower and four upper envelope terms at a row."""
    jac = atom_gradients(flat, layout, z_row, param_indices)
    return bounds.LOWER_COEFS @ jac, bounds.UPPER_COEFS @ jac


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings plus the frozen standardization statistics."""

    learning_rate: float = 3e-4
    batch_size: int = 8192
    epochs: int = 800
    validation_fraction: float = 0.0
    seed: int = 0
    val_every: int = 400
    scaler: Standardizer | None = None

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ValueError("validation_fraction must lie in [0, 1)")


@dataclass
class TrainHistory:
    val_epochs: list = field(default_factory=list)
    val_losses: list = field(default_factory=list)


def _split_validation(n: int, fraction: float, seed) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_val = int(round(fraction * n))
    return order[n_val:], order[:n_val]


def train(
    layout: ParamLayout,
    Z,
    x,
    y,
    is_exp,
    cfg: TrainConfig,
    init_seed=None,
    epoch_callback=None,
) -> tuple[np.ndarray, TrainHistory]:
    """Train the anchored network; deterministic given the config seeds.

    Returns the final-epoch parameters (no early stopping) and the recorded
    validation-loss history.  Divergence (non-finite loss) raises
    :class:`pnsbounds.mlp.TrainingDiverged`.
    """
    Z = np.asarray(Z, dtype=float)
    if cfg.scaler is not None:
        Z = cfg.scaler.transform(Z)
    x = np.asarray(x)
    y = np.asarray(y)
    is_exp = np.asarray(is_exp, dtype=bool)
    ss = np.random.SeedSequence(cfg.seed)
    shuffle_seed, split_seed, default_init = ss.spawn(3)
    if init_seed is None:
        init_seed = default_init
    params = layout.init(init_seed)

    train_idx = np.arange(Z.shape[0])
    val_idx = np.empty(0, dtype=int)
    if cfg.validation_fraction > 0.0:
        train_idx, val_idx = _split_validation(Z.shape[0], cfg.validation_fraction, split_seed)
    Zt, xt, yt, et = Z[train_idx], x[train_idx], y[train_idx], is_exp[train_idx]

    history = TrainHistory()

    def loss_grad(p, batch):
        return anchored_loss_and_grad(p, layout, Zt[batch], xt[batch], yt[batch], et[batch])

    def on_epoch(epoch, p):
        if val_idx.size and cfg.val_every and (epoch + 1) % cfg.val_every == 0:
            val_loss, _ = anchored_loss_and_grad(
                p, layout, Z[val_idx], x[val_idx], y[val_idx], is_exp[val_idx]
            )
            history.val_epochs.append(epoch)
            history.val_losses.append(val_loss)
        if epoch_callback is not None:
            epoch_callback(epoch, p)

    run_training(
        params,
        loss_grad,
        len(train_idx),
        learning_rate=cfg.learning_rate,
        batch_size=cfg.batch_size,
        epochs=cfg.epochs,
        shuffle_seed=shuffle_seed,
        epoch_callback=on_epoch,
    )
    return params, history


class AnchoredBoundsEstimator(BaseEstimator):
    """Anchored network estimator with plug-in interval prediction.

    Parameters mirror the training configuration; ``fit`` takes pooled rows
    from both regimes with a regime column (mask formulation).

    Examples
    --------
    >>> est = AnchoredBoundsEstimator(hidden_width=16, epochs=5, seed=0)
    >>> est.fit(Z, x, y, regime)          # doctest: +SKIP
    >>> intervals = est.predict_interval(Z_test)   # doctest: +SKIP
    """

    method_name = "anchored"

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
    ):
        self.hidden_width = hidden_width
        self.depth = depth
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.validation_fraction = validation_fraction
        self.standardize = standardize
        self.seed = seed

    def _prepare_fit(self, Z, treatment, outcome, regime):
        Z = check_covariates(Z)
        treatment = check_binary(treatment, "treatment")
        outcome = check_binary(outcome, "outcome")
        is_exp = check_regime(regime)
        check_consistent_length(Z, treatment, outcome, is_exp)
        if not is_exp.any() or is_exp.all():
            raise ValueError("fit requires rows from both regimes")
        scaler = (
            Standardizer.fit(Z) if self.standardize else Standardizer.identity(Z.shape[1])
        )
        return Z, treatment, outcome, is_exp, scaler

    def _train_config(self, scaler) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            epochs=self.epochs,
            validation_fraction=self.validation_fraction,
            seed=self.seed,
            scaler=scaler,
        )

    def fit(self, Z, treatment, outcome, regime):
        Z, treatment, outcome, is_exp, scaler = self._prepare_fit(
            Z, treatment, outcome, regime
        )
        self.layout_ = anchored_layout(Z.shape[1], self.hidden_width, self.depth)
        self.scaler_ = scaler
        cfg = self._train_config(scaler)
        self.params_, self.history_ = train(
            self.layout_, Z, treatment, outcome, is_exp, cfg
        )
        self.n_features_in_ = Z.shape[1]
        return self

    def predict_atoms(self, Z) -> np.ndarray:
        check_fitted(self, "params_")
        Z = check_covariates(Z, self.n_features_in_)
        return forward_atoms(self.params_, self.layout_, self.scaler_.transform(Z))

    def envelope(self, Z):
        """Plug-in envelope arrays (lower, upper, crossed) for rows of Z."""
        return bounds.plug_in_envelope(self.predict_atoms(Z))

    def predict_interval(self, Z) -> list[bounds.PnsInterval]:
        lower, upper, crossed = self.envelope(Z)
        return [
            bounds.PnsInterval(
                lower=float(lo), upper=float(up), crossed=bool(cr),
                method=self.method_name,
            )
            for lo, up, cr in zip(np.atleast_1d(lower), np.atleast_1d(upper),
                                  np.atleast_1d(crossed))
        ]

    def feasibility_audit(self, Z, tol: float = bounds.AUDIT_FEASIBILITY_TOL):
        """Per-row compatibility check of predicted atoms (true by construction)."""
        return bounds.check_feasibility(self.predict_atoms(Z), tol)
