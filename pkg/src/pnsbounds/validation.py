"""Input validation and standardization helpers shared by the estimators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class NotFittedError(RuntimeError):
    """Raised when predict-style methods are called before fit."""


def check_covariates(Z, n_features: int | None = None) -> np.ndarray:
    """Coerce to a 2-D float64 matrix of finite covariates."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z.reshape(1, -1)
    if Z.ndim != 2:
        raise ValueError(f"covariates must be a 2-D matrix, got ndim={Z.ndim}")
    if not np.all(np.isfinite(Z)):
        raise ValueError("covariates contain non-finite entries")
    if n_features is not None and Z.shape[1] != n_features:
        raise ValueError(f"expected {n_features} covariate columns, got {Z.shape[1]}")
    return Z


def check_binary(values, name: str) -> np.ndarray:
    values = np.asarray(values)
    out = values.astype(np.int64, copy=True)
    if not np.array_equal(out, values) or not np.isin(out, (0, 1)).all():
        raise ValueError(f"{name} must be binary 0/1 values")
    return out


def check_regime(regime) -> np.ndarray:
    """Normalize a regime column to a boolean is-experimental mask.

    Accepts 0/1, booleans, or the strings "obs"/"exp" (case-insensitive).
    """
    arr = np.asarray(regime)
    if arr.dtype.kind in "US":
        lowered = np.char.lower(arr.astype(str))
        if not np.isin(lowered, ("obs", "exp", "observational", "experimental")).all():
            raise ValueError("regime strings must be 'obs' or 'exp'")
        return np.isin(lowered, ("exp", "experimental"))
    return check_binary(arr, "regime").astype(bool)


def check_consistent_length(*arrays) -> int:
    lengths = {len(a) for a in arrays}
    if len(lengths) != 1:
        raise ValueError(f"inconsistent array lengths: {sorted(lengths)}")
    return lengths.pop()


def check_fitted(estimator, attribute: str) -> None:
    if getattr(estimator, attribute, None) is None:
        raise NotFittedError(
            f"{type(estimator).__name__} is not fitted; call fit() first"
        )


@dataclass(frozen=True)
class Standardizer:
    """Per-feature centering and scaling frozen at fit time."""

    mean: np.ndarray
    scale: np.ndarray

    @classmethod
    def fit(cls, Z: np.ndarray, floor: float = 1e-8) -> "Standardizer":
        Z = np.asarray(Z, dtype=np.float64)
        return cls(mean=Z.mean(axis=0), scale=np.maximum(Z.std(axis=0), floor))

    @classmethod
    def identity(cls, n_features: int) -> "Standardizer":
        return cls(mean=np.zeros(n_features), scale=np.ones(n_features))

    def transform(self, Z: np.ndarray) -> np.ndarray:
        return (np.asarray(Z, dtype=np.float64) - self.mean) / self.scale
