"""Minimal-deviation residual corrections for tabular event samples.

Learns bounded per-event corrections x' = x + delta(x) so that the 1-D
marginals and derived observables of a simulated sample match a target
while the correlation structure is preserved.
"""

from .dataset import (
    EventTable,
    Feature,
    FeatureSchema,
    MarginalSpec,
    Standardizer,
    ToyConfig,
    fit_standardizer,
    generate_toy_pair,
    read_events,
    schema_from_names,
    write_events,
)
from .estimators import GlobalResidualCorrector, QuantileMapper, TwoStepResidualCorrector
from .evaluation import (
    ClassifierSpec,
    EvalReport,
    auc,
    build_report,
    correlation_report,
    distribution_distances,
    hard_histogram,
    ks_distance,
    quantile_baseline,
    roc_curve,
    transfer_roc_test,
    two_sample_test,
)
from .losses import CompositeObjective, HistogramSpec, LossWeights, TargetTemplate
from .models import (
    FeatureResidualModel,
    GlobalResidualModel,
    TwoStepModel,
    load_model,
    save_model,
)
from .observables import ObjectSpec, ObservableSpec
from .training import TrainConfig, TrainLog, train_feature, train_global, train_twostep

__version__ = "0.1.0"

__all__ = [
    "EventTable",
    "Feature",
    "FeatureSchema",
    "MarginalSpec",
    "Standardizer",
    "ToyConfig",
    "fit_standardizer",
    "generate_toy_pair",
    "read_events",
    "schema_from_names",
    "write_events",
    "GlobalResidualCorrector",
    "QuantileMapper",
    "TwoStepResidualCorrector",
    "ClassifierSpec",
    "EvalReport",
    "auc",
    "build_report",
    "correlation_report",
    "distribution_distances",
    "hard_histogram",
    "ks_distance",
    "quantile_baseline",
    "roc_curve",
    "transfer_roc_test",
    "two_sample_test",
    "CompositeObjective",
    "HistogramSpec",
    "LossWeights",
    "TargetTemplate",
    "FeatureResidualModel",
    "GlobalResidualModel",
    "TwoStepModel",
    "load_model",
    "save_model",
    "ObjectSpec",
    "ObservableSpec",
    "TrainConfig",
    "TrainLog",
    "train_feature",
    "train_global",
    "train_twostep",
    "__version__",
]
