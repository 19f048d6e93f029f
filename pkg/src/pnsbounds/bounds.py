"""Tian-Pearl bound algebra for the probability of necessity and sufficiency.

Everything in this module is pure arithmetic on the six atom probabilities

    eta(z) = (mu1, mu0, p11, p10, p01, p00),

where ``mu_x = P(Y=1 | do(X=x), Z=z)`` comes from the experimental regime and
``p_xy = P(X=x, Y=y | Z=z)`` from the observational one.  The two regimes are
tied together by the compatibility constraints

    p11 <= mu1 <= 1 - p10      and      p01 <= mu0 <= 1 - p00,

and the sharp PNS envelope is a max over four lower terms and a min over four
upper terms, each an affine function of the atom vector.  Functions accept
either a single :class:`AtomVector` or an ndarray whose last axis has length 6
(atom order as above) and vectorize over leading axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ATOM_FIELDS = ("mu1", "mu0", "p11", "p10", "p01", "p00")

# Rows of the affine envelope maps, in atom order (mu1, mu0, p11, p10, p01, p00).
# Lower terms: 0, mu1 - mu0, p11 + p01 - mu0, mu1 - p11 - p01.
LOWER_COEFS = np.array(
    [
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [1.0, -1.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, -1.0, 1.0, 0.0, 1.0, 0.0],
        [1.0, 0.0, -1.0, 0.0, -1.0, 0.0],
    ]
)
LOWER_OFFSETS = np.zeros(4)

# Upper terms: mu1, 1 - mu0, p11 + p00, mu1 - mu0 + p10 + p01.
UPPER_COEFS = np.array(
    [
        [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, -1.0, 0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0, 0.0, 1.0],
        [1.0, -1.0, 0.0, 1.0, 1.0, 0.0],
    ]
)
UPPER_OFFSETS = np.array([0.0, 1.0, 0.0, 0.0])

#: Index of the constant-zero lower term; its dispersion is identically zero.
CONSTANT_LOWER_TERM = 0

#: Default feasibility tolerances: exact oracles vs audits of learned models.
ORACLE_FEASIBILITY_TOL = 1e-9
AUDIT_FEASIBILITY_TOL = 1e-6


@dataclass(frozen=True)
class AtomVector:
    """The six conditional probabilities at one covariate point."""

    mu1: float
    mu0: float
    p11: float
    p10: float
    p01: float
    p00: float

    def as_array(self) -> np.ndarray:
        return np.array([self.mu1, self.mu0, self.p11, self.p10, self.p01, self.p00])

    @classmethod
    def from_array(cls, values) -> "AtomVector":
        values = np.asarray(values, dtype=float)
        if values.shape != (6,):
            raise ValueError(f"atom vector must have shape (6,), got {values.shape}")
        return cls(*(float(v) for v in values))

    def validate(self, tol: float = ORACLE_FEASIBILITY_TOL) -> None:
        """Check the simplex invariants (range and partition of unity)."""
        arr = self.as_array()
        if np.any(arr < -tol) or np.any(arr > 1.0 + tol):
            raise ValueError(f"atom entries outside [0, 1]: {arr}")
        joint_sum = self.p00 + self.p01 + self.p10 + self.p11
        if abs(joint_sum - 1.0) > tol:
            raise ValueError(f"joint probabilities sum to {joint_sum}, expected 1")


@dataclass(frozen=True)
class BoundTerms:
    """Envelope terms: four lower and four upper values (or stacks thereof)."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", np.asarray(self.lower, dtype=float))
        object.__setattr__(self, "upper", np.asarray(self.upper, dtype=float))
        if self.lower.shape[-1] != 4 or self.upper.shape[-1] != 4:
            raise ValueError("bound terms must have 4 lower and 4 upper entries")


@dataclass(frozen=True)
class PnsInterval:
    """An estimated PNS interval with provenance.

    ``crossed`` records whether the raw envelope had lower > upper before
    clipping; crossed intervals are flagged, never repaired.  ``kappa_lower``
    and ``kappa_upper`` are zero for plug-in constructions.
    """

    lower: float
    upper: float
    crossed: bool = False
    method: str = "plug_in"
    kappa_lower: float = 0.0
    kappa_upper: float = 0.0

    def width(self) -> float:
        return self.upper - self.lower

    def contains(self, value: float, tol: float = 0.0) -> bool:
        return (not self.crossed) and (self.lower - tol <= value <= self.upper + tol)


def _atoms_to_array(atoms) -> np.ndarray:
    if isinstance(atoms, AtomVector):
        return atoms.as_array()
    arr = np.asarray(atoms, dtype=float)
    if arr.shape[-1] != 6:
        raise ValueError(f"atoms must have last axis of length 6, got shape {arr.shape}")
    return arr


def check_feasibility(atoms, tol: float = 0.0):
    """True iff the compatibility constraints hold up to ``tol``.

    Tests ``p11 - tol <= mu1 <= 1 - p10 + tol`` and
    ``p01 - tol <= mu0 <= 1 - p00 + tol``.  Pure predicate: simplex validity
    of the input is a precondition, not re-checked here.

    Parameters
    ----------
    atoms : AtomVector or ndarray (..., 6)
    tol : float
        Nonnegative slack on each inequality.

    Returns
    -------
    bool or boolean ndarray over the leading axes.
    """
    arr = _atoms_to_array(atoms)
    mu1, mu0 = arr[..., 0], arr[..., 1]
    p11, p10, p01, p00 = arr[..., 2], arr[..., 3], arr[..., 4], arr[..., 5]
    ok = (
        (p11 - tol <= mu1)
        & (mu1 <= 1.0 - p10 + tol)
        & (p01 - tol <= mu0)
        & (mu0 <= 1.0 - p00 + tol)
    )
    if isinstance(atoms, AtomVector):
        return bool(ok)
    return ok


def bound_terms(atoms) -> BoundTerms:
    """Evaluate the four lower and four upper envelope terms.

    lower = (0, mu1 - mu0, p11 + p01 - mu0, mu1 - p11 - p01)
    upper = (mu1, 1 - mu0, p11 + p00, mu1 - mu0 + p10 + p01)
    """
    arr = _atoms_to_array(atoms)
    lower = arr @ LOWER_COEFS.T + LOWER_OFFSETS
    upper = arr @ UPPER_COEFS.T + UPPER_OFFSETS
    return BoundTerms(lower=lower, upper=upper)


def plug_in_envelope(atoms):
    """Vectorized plug-in envelope: (lower, upper, crossed) arrays.

    Lower is the max of lower terms, upper the min of upper terms, both
    clipped to [0, 1].  ``crossed`` is evaluated on the raw envelope before
    clipping.
    """
    terms = bound_terms(atoms)
    raw_lower = terms.lower.max(axis=-1)
    raw_upper = terms.upper.min(axis=-1)
    crossed = raw_lower > raw_upper
    return np.clip(raw_lower, 0.0, 1.0), np.clip(raw_upper, 0.0, 1.0), crossed


def plug_in_interval(atoms, method: str = "plug_in") -> PnsInterval:
    """Plug-in PNS interval for a single atom vector."""
    lower, upper, crossed = plug_in_envelope(atoms)
    if np.ndim(lower) != 0:
        raise ValueError("plug_in_interval is per-point; use plug_in_envelope for batches")
    return PnsInterval(
        lower=float(lower), upper=float(upper), crossed=bool(crossed), method=method
    )


def corrected_envelope(lower_means, lower_stds, upper_means, upper_stds, kappa_l, kappa_u):
    """Vectorized precision-corrected envelope over (..., 4) term stacks.

    Each lower term is penalized by ``kappa_l`` times its dispersion before
    the max, each upper term widened by ``kappa_u`` times its dispersion
    before the min.  Returns (lower, upper, crossed) with endpoints clipped
    to [0, 1] and the crossed flag taken pre-clipping.
    """
    lower_stds = np.asarray(lower_stds, dtype=float)
    upper_stds = np.asarray(upper_stds, dtype=float)
    if np.any(lower_stds < 0.0) or np.any(upper_stds < 0.0):
        raise ValueError("term standard deviations must be nonnegative")
    if kappa_l < 0.0 or kappa_u < 0.0:
        raise ValueError("critical values must be nonnegative")
    raw_lower = (np.asarray(lower_means, dtype=float) - kappa_l * lower_stds).max(axis=-1)
    raw_upper = (np.asarray(upper_means, dtype=float) + kappa_u * upper_stds).min(axis=-1)
    crossed = raw_lower > raw_upper
    return np.clip(raw_lower, 0.0, 1.0), np.clip(raw_upper, 0.0, 1.0), crossed


def precision_corrected_interval(
    term_means: BoundTerms,
    term_stds: BoundTerms,
    kappa_l: float,
    kappa_u: float,
    method: str = "precision_corrected",
) -> PnsInterval:
    """Precision-corrected PNS interval from per-term means and dispersions.

    With ``kappa_l = kappa_u = 0`` this reduces to the plug-in envelope of
    the means.  The dispersion of the constant lower term is expected to be
    exactly zero (caller contract).
    """
    lower, upper, crossed = corrected_envelope(
        term_means.lower, term_stds.lower, term_means.upper, term_stds.upper, kappa_l, kappa_u
    )
    if np.ndim(lower) != 0:
        raise ValueError("precision_corrected_interval is per-point")
    return PnsInterval(
        lower=float(lower),
        upper=float(upper),
        crossed=bool(crossed),
        method=method,
        kappa_lower=float(kappa_l),
        kappa_upper=float(kappa_u),
    )


def active_terms(atoms) -> tuple[int, int]:
    """Indices of the binding lower and upper terms (first index wins ties).

    Diagnostic only: tie-breaking never affects the envelope values.
    """
    terms = bound_terms(atoms)
    if terms.lower.ndim != 1:
        raise ValueError("active_terms is per-point")
    return int(np.argmax(terms.lower)), int(np.argmin(terms.upper))
