"""Estimator-style wrappers: fit on (X_source, X_target), transform new
source-like arrays.

These follow the scikit-learn conventions (get_params/set_params via
BaseEstimator, fitted attributes with trailing underscores) so the
correctors compose with standard tooling, while the underlying modules
stay importable on their own.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import evaluation as ev
from . import training as tr
from .dataset import EventTable, FeatureSchema, schema_from_names


def _as_rows(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError(f"expected a 2-D array, got shape {X.shape}")
    return X


def _resolve_schema(schema, d: int) -> FeatureSchema:
    if schema is None:
        return schema_from_names([f"x{j}" for j in range(d)])
    if schema.d != d:
        raise ValueError(f"schema has {schema.d} features, data has {d} columns")
    return schema


class _ResidualCorrectorBase(BaseEstimator, TransformerMixin):
    def __init__(self, schema=None, train_config=None, observable_specs=()):
        self.schema = schema
        self.train_config = train_config
        self.observable_specs = observable_specs

    def _tables(self, X_source, X_target):
        X_source = _as_rows(X_source)
        X_target = _as_rows(X_target)
        if X_source.shape[1] != X_target.shape[1]:
            raise ValueError("source and target must have the same feature count")
        schema = _resolve_schema(self.schema, X_source.shape[1])
        cfg = self.train_config or tr.TrainConfig()
        source = EventTable(schema, X_source, provenance="source")
        target = EventTable(schema, X_target, provenance="target")
        return source, target, cfg

    def transform(self, X):
        check_is_fitted(self, "model_")
        rows = _as_rows(X)
        z = self.standardizer_.transform(rows)
        return self.standardizer_.inverse(self.model_.transform(z))

    def fit_transform(self, X, y=None, **fit_params):
        # the estimator is fit on a (source, target) pair, not (X, y)
        return self.fit(X, **fit_params).transform(X)


class GlobalResidualCorrector(_ResidualCorrectorBase):
    """Bounded residual network trained under the composite loss in one
    global stage."""

    def fit(self, X_source, X_target=None, y=None):
        if X_target is None:
            raise ValueError("fit requires a target sample: fit(X_source, X_target)")
        source, target, cfg = self._tables(X_source, X_target)
        self.model_, self.standardizer_, self.log_ = tr.train_global(
            source, target, cfg, observable_specs=self.observable_specs
        )
        self.n_features_in_ = source.schema.d
        return self


class TwoStepResidualCorrector(_ResidualCorrectorBase):
    """Per-feature marginal stage followed by a global refinement driven
    by derived observables and the target correlation matrix."""

    def __init__(self, schema=None, train_config=None, observable_specs=(), objects=()):
        super().__init__(schema, train_config, observable_specs)
        self.objects = objects

    def fit(self, X_source, X_target=None, y=None):
        if X_target is None:
            raise ValueError("fit requires a target sample: fit(X_source, X_target)")
        source, target, cfg = self._tables(X_source, X_target)
        self.model_, self.standardizer_, self.log_, self.stage1_logs_ = tr.train_twostep(
            source, target, cfg, observable_specs=self.observable_specs, objects=self.objects
        )
        self.n_features_in_ = source.schema.d
        return self


class QuantileMapper(BaseEstimator, TransformerMixin):
    """Per-feature empirical quantile mapping onto the target marginals;
    deliberately blind to correlations."""

    def __init__(self, schema=None, exclude_sentinels=False):
        self.schema = schema
        self.exclude_sentinels = exclude_sentinels

    def fit(self, X_source, X_target=None, y=None):
        if X_target is None:
            raise ValueError("fit requires a target sample: fit(X_source, X_target)")
        X_source = _as_rows(X_source)
        X_target = _as_rows(X_target)
        if X_source.shape[1] != X_target.shape[1]:
            raise ValueError("source and target must have the same feature count")
        self.schema_ = _resolve_schema(self.schema, X_source.shape[1])
        self.source_ = EventTable(self.schema_, X_source, provenance="source")
        self.target_ = EventTable(self.schema_, X_target, provenance="target")
        self.n_features_in_ = self.schema_.d
        return self

    def transform(self, X):
        check_is_fitted(self, "schema_")
        rows = _as_rows(X)
        table = EventTable(self.schema_, rows, provenance="source")
        sent = table.sentinel_matrix()
        sent_s = self.source_.sentinel_matrix()
        sent_t = self.target_.sentinel_matrix()
        out = rows.copy()
        for j, feat in enumerate(self.schema_.features):
            has_sentinels = sent[:, j].any() or sent_s[:, j].any() or sent_t[:, j].any()
            if has_sentinels and not self.exclude_sentinels:
                raise ev.EvaluationError(
                    f"feature {feat.name!r} carries padding sentinels; "
                    "set exclude_sentinels=True to map only the real entries"
                )
            keep = ~sent[:, j]
            out[keep, j] = ev.quantile_map_feature(
                self.source_.rows[~sent_s[:, j], j],
                self.target_.rows[~sent_t[:, j], j],
                query=rows[keep, j],
            )
        return out
