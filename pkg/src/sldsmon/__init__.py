"""Switching linear dynamical system toolkit for vital-sign condition monitoring.

Infers a patient's discrete state-of-health and continuous latent physiology
from multichannel vital-sign time series.  Two model families are provided —
a generative factorial switching LDS filtered with the Gaussian-Sum (GPB)
approximation, and a discriminative variant whose switch posterior comes from
per-factor random forests — plus an alpha-mixture combination of the two, a
synthetic scenario simulator, and an evaluation harness with nested
cross-validation.

Module map: `gaussian` (belief algebra), `factors` (switch space and regime
composition), `arima` (per-channel dynamics learning), `features` (window
features), `forest` (random forest with surrogate splits), `inference` (the
filters and the alpha-mixture), `evaluation` (AUC/CV harness), `simulate`,
`dataio`, `train`, and `cli`.
"""

from .dataio import AnnotatedDataset, ModelBundle, ScenarioSpec, load_bundle, load_dataset
from .evaluation import build_fold_plan, evaluate_models, roc_auc
from .factors import FactorSpec, SwitchConfig, build_switch_space
from .features import WindowSpec, feature_matrix
from .forest import Forest, fit_forest, predict_proba
from .gaussian import GaussianBelief, RegimeParams
from .inference import (
    InferenceOutput,
    SwitchPosterior,
    alpha_mixture,
    dslds_filter,
    fslds_filter,
    impute_physiology,
)
from .simulate import benchmark_scenario, simulate
from .train import TrainConfig, run_model, train_bundle

__version__ = "0.1.0"

__all__ = [
    "AnnotatedDataset",
    "FactorSpec",
    "Forest",
    "GaussianBelief",
    "InferenceOutput",
    "ModelBundle",
    "RegimeParams",
    "ScenarioSpec",
    "SwitchConfig",
    "SwitchPosterior",
    "TrainConfig",
    "WindowSpec",
    "alpha_mixture",
    "benchmark_scenario",
    "build_fold_plan",
    "build_switch_space",
    "dslds_filter",
    "evaluate_models",
    "feature_matrix",
    "fit_forest",
    "fslds_filter",
    "impute_physiology",
    "load_bundle",
    "load_dataset",
    "predict_proba",
    "roc_auc",
    "run_model",
    "simulate",
    "train_bundle",
]
