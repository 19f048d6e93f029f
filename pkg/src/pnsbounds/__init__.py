"""Finite-sample Tian-Pearl bounds on the probability of necessity and
sufficiency, estimated from combined experimental and observational data.

The package provides the bound algebra, two exactly-solvable synthetic
data-generating processes with oracle queries, an anchored multi-head
neural estimator whose outputs satisfy the compatibility constraints by
construction, precision-corrected inference via an epistemic hypermodel or
a multiplier bootstrap, plug-in baselines, evaluation metrics, and a
config-driven experiment harness with a CLI.
"""

from .anchored import AnchoredBoundsEstimator, TrainConfig
from .baselines import SLearnerBounds, TLearnerBounds, plug_in_predict
from .bootstrap import MultiplierBootstrapBounds
from .bounds import (
    AtomVector,
    BoundTerms,
    PnsInterval,
    bound_terms,
    check_feasibility,
    plug_in_interval,
    precision_corrected_interval,
)
from .configs import ExperimentConfig, load_config
from .epinet import (
    EpistemicBoundsEstimator,
    HyperModel,
    bound_statistics,
    critical_values,
    infer_interval,
    sample_params,
    train_enn,
)
from .experiment import run_experiment, run_sweep
from .metrics import MetricsReport, aggregate_replicates, evaluate, interval_score
from .scm_highdim import CovariateSource, HighDimScm
from .scm_lowdim import LowDimScm, RegimeDataset, RegimeSample

__version__ = "0.1.0"

__all__ = [
    "AnchoredBoundsEstimator",
    "AtomVector",
    "BoundTerms",
    "CovariateSource",
    "EpistemicBoundsEstimator",
    "ExperimentConfig",
    "HighDimScm",
    "HyperModel",
    "LowDimScm",
    "MetricsReport",
    "MultiplierBootstrapBounds",
    "PnsInterval",
    "RegimeDataset",
    "RegimeSample",
    "SLearnerBounds",
    "TLearnerBounds",
    "TrainConfig",
    "aggregate_replicates",
    "bound_statistics",
    "bound_terms",
    "check_feasibility",
    "critical_values",
    "evaluate",
    "infer_interval",
    "interval_score",
    "load_config",
    "plug_in_interval",
    "plug_in_predict",
    "precision_corrected_interval",
    "run_experiment",
    "run_sweep",
    "sample_params",
    "train_enn",
]
