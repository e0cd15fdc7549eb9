"""Closure metrics: hard-histogram distances, correlation comparisons and
the classifier two-sample test.

Evaluation deliberately uses quantities distinct from the training
objective (hard bins, symmetric chi^2) so the report is not the thing
being optimized.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import autodiff as ad
from . import losses as ls
from . import models as md
from . import training as tr
from .dataset import EventTable

CHI2_EPS = 1e-12


class EvaluationError(Exception):
    pass


# ---------------------------------------------------------------------------
# Histograms and distances


def hard_histogram(values, spec: ls.HistogramSpec):
    """Bin fractions plus underflow/overflow fractions.

    Left-closed right-open bins; the last bin is right-closed, matching
    the numpy convention.
    """
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    if n == 0:
        return np.zeros(spec.bins), 0.0, 0.0
    counts, _ = np.histogram(values, bins=spec.edges)
    under = float(np.count_nonzero(values < spec.lo)) / n
    over = float(np.count_nonzero(values > spec.hi)) / n
    return counts / n, under, over


def distribution_distances(a, b, spec: ls.HistogramSpec):
    """(symmetric chi^2 over hard bins, two-sample KS distance)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise EvaluationError("distribution_distances needs nonempty samples")
    p, _, _ = hard_histogram(a, spec)
    q, _, _ = hard_histogram(b, spec)
    chi2 = float(np.sum((p - q) ** 2 / (p + q + CHI2_EPS)))
    ks = ks_distance(a, b)
    return chi2, ks


def ks_distance(a, b) -> float:
    """Max absolute difference of the two empirical CDFs."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    pooled = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, pooled, side="right") / a.size
    cdf_b = np.searchsorted(b, pooled, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def _complete_rows(table: EventTable) -> np.ndarray:
    sent = table.sentinel_matrix()
    return table.rows[~sent.any(axis=1)]


def correlation_report(target: EventTable, transformed: EventTable) -> dict:
    """Pearson matrices on sentinel-complete rows and their difference."""
    if target.schema != transformed.schema:
        raise EvaluationError("correlation_report requires a shared schema")
    rows_t = _complete_rows(target)
    rows_x = _complete_rows(transformed)
    if rows_t.shape[0] < 2 or rows_x.shape[0] < 2:
        raise EvaluationError("fewer than 2 sentinel-complete rows")
    rho_t = ls.pearson_matrix_values(rows_t)
    rho_x = ls.pearson_matrix_values(rows_x)
    diff = rho_x - rho_t
    off = ~np.eye(diff.shape[0], dtype=bool)
    return {
        "rho_target": rho_t,
        "rho_transformed": rho_x,
        "difference": diff,
        "max_abs_offdiag": float(np.max(np.abs(diff[off]))) if off.any() else 0.0,
        "mean_abs_offdiag": float(np.mean(np.abs(diff[off]))) if off.any() else 0.0,
    }


# ---------------------------------------------------------------------------
# ROC / AUC


def auc(scores_pos, scores_neg) -> float:
    """Mann-Whitney rank statistic; ties count one half."""
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    if pos.size == 0 or neg.size == 0:
        raise EvaluationError("auc needs both score sets nonempty")
    ranks = stats.rankdata(np.concatenate([pos, neg]))
    rank_sum = ranks[: pos.size].sum()
    return float((rank_sum - pos.size * (pos.size + 1) / 2) / (pos.size * neg.size))


def roc_curve(scores_pos, scores_neg, n_thresholds: int = 201):
    """(fpr, tpr, thresholds); evenly spaced thresholds in [0,1] plus the
    empirical scores when the sample is small, anchored at (0,0) and (1,1)."""
    pos = np.asarray(scores_pos, dtype=np.float64)
    neg = np.asarray(scores_neg, dtype=np.float64)
    grid = np.linspace(0.0, 1.0, n_thresholds)
    if pos.size + neg.size <= 10_000:
        grid = np.concatenate([grid, pos, neg])
    grid = np.unique(np.concatenate([grid, [np.inf]]))
    # descending thresholds -> non-decreasing rates
    grid = grid[::-1]
    tpr = np.array([np.mean(pos >= t) for t in grid])
    fpr = np.array([np.mean(neg >= t) for t in grid])
    return fpr, tpr, grid


# ---------------------------------------------------------------------------
# Classifier two-sample test


@dataclass(frozen=True)
class ClassifierSpec:
    hidden: tuple = (64, 64)
    train: tr.TrainConfig = field(
        default_factory=lambda: tr.TrainConfig(
            batch_size=2048, allow_small_batch=True, max_epochs=50
        )
    )
    n_thresholds: int = 201

    def to_dict(self) -> dict:
        return {
            "hidden": list(self.hidden),
            "train": self.train.to_dict(),
            "n_thresholds": self.n_thresholds,
        }

    @staticmethod
    def from_dict(d: dict) -> "ClassifierSpec":
        return ClassifierSpec(
            hidden=tuple(d.get("hidden", (64, 64))),
            train=tr.TrainConfig.from_dict(d["train"]) if "train" in d else ClassifierSpec().train,
            n_thresholds=int(d.get("n_thresholds", 201)),
        )


class _Classifier:
    """MLP with a sigmoid head mapping d features to a score in (0,1)."""

    def __init__(self, d: int, hidden, seed: int):
        self.mlp = md.init_mlp((d, *hidden, 1), seed=seed)
        self.mean = np.zeros(d)
        self.scale = np.ones(d)

    def parameters(self):
        return self.mlp.parameters()

    def logits(self, rows: np.ndarray) -> ad.Tensor:
        z = (rows - self.mean) / self.scale
        return ad.reshape(self.mlp.forward(ad.Tensor(z)), (-1,))

    def scores(self, rows: np.ndarray) -> np.ndarray:
        logits = self.logits(np.asarray(rows, dtype=np.float64))
        return ad.sigmoid(logits).values


def _fit_classifier(rows: np.ndarray, labels: np.ndarray, spec: ClassifierSpec, seed: int):
    """BCE training with the shared minibatch/early-stopping loop; the
    label rides along as an extra column."""
    d = rows.shape[1]
    clf = _Classifier(d, spec.hidden, seed=seed)
    clf.mean = rows.mean(axis=0)
    clf.scale = np.maximum(rows.std(axis=0), 1e-8)

    import dataclasses

    packed = np.column_stack([rows, labels.astype(np.float64)])
    cfg = dataclasses.replace(spec.train, seed=seed)
    train_idx, val_idx = tr.split_indices(packed.shape[0], cfg.split_fraction, seed)

    def loss_fn(batch, sent):
        logits = clf.logits(batch[:, :d])
        loss = ad.bce_with_logits(logits, batch[:, d])
        return loss, {"bce": loss.item(), "total": loss.item()}

    sent = np.zeros_like(packed, dtype=bool)
    log = tr.optimize(
        clf, packed[train_idx], sent[train_idx], packed[val_idx], sent[val_idx],
        loss_fn, cfg,
    )
    return clf, log, train_idx, val_idx


def two_sample_test(a: EventTable, b: EventTable, spec: ClassifierSpec, seed: int = 0):
    """Held-out AUC and ROC of a classifier labeling a=1 versus b=0."""
    if a.schema != b.schema:
        raise EvaluationError("two_sample_test requires a shared schema")
    rows = np.vstack([a.rows, b.rows])
    labels = np.concatenate([np.ones(a.n), np.zeros(b.n)])
    clf, log, _, val_idx = _fit_classifier(rows, labels, spec, seed)
    val_scores = clf.scores(rows[val_idx])
    val_labels = labels[val_idx]
    pos = val_scores[val_labels == 1]
    neg = val_scores[val_labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise EvaluationError("validation split lost one class entirely")
    value = auc(pos, neg)
    fpr, tpr, thr = roc_curve(pos, neg, spec.n_thresholds)
    return value, {"fpr": fpr, "tpr": tpr, "thresholds": thr}, log


def transfer_roc_test(source: EventTable, target: EventTable, transformed: EventTable,
                      spec: ClassifierSpec, seed: int = 0):
    """Train source-vs-target once; score the held-out pair twice, the
    second time with transformed events standing in for the target."""
    if not (source.schema == target.schema == transformed.schema):
        raise EvaluationError("transfer_roc_test requires one shared schema")
    rows = np.vstack([source.rows, target.rows])
    labels = np.concatenate([np.ones(source.n), np.zeros(target.n)])
    clf, log, _, val_idx = _fit_classifier(rows, labels, spec, seed)

    val_scores = clf.scores(rows[val_idx])
    val_labels = labels[val_idx]
    pos = val_scores[val_labels == 1]
    neg = val_scores[val_labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise EvaluationError("validation split lost one class entirely")

    # held-out subset of the transformed sample, same fraction
    _, trans_idx = tr.split_indices(transformed.n, spec.train.split_fraction, seed)
    neg_proxy = clf.scores(transformed.rows[trans_idx])

    auc_target = auc(pos, neg)
    auc_proxy = auc(pos, neg_proxy)
    fpr_t, tpr_t, thr = roc_curve(pos, neg, spec.n_thresholds)
    fpr_p, tpr_p, _ = roc_curve(pos, neg_proxy, spec.n_thresholds)
    return {
        "auc_target": auc_target,
        "auc_transformed": auc_proxy,
        "delta_auc": abs(auc_target - auc_proxy),
        "roc_target": {"fpr": fpr_t, "tpr": tpr_t, "thresholds": thr},
        "roc_transformed": {"fpr": fpr_p, "tpr": tpr_p, "thresholds": thr},
        "log": log,
    }


# ---------------------------------------------------------------------------
# Report assembly


def _feature_panel(name, spec, src_vals, tgt_vals, trf_vals):
    p_src, u_s, o_s = hard_histogram(src_vals, spec)
    p_tgt, u_t, o_t = hard_histogram(tgt_vals, spec)
    p_trf, u_x, o_x = hard_histogram(trf_vals, spec)
    chi2, ks = distribution_distances(trf_vals, tgt_vals, spec)
    return {
        "name": name,
        "edges": spec.edges.tolist(),
        "source": p_src.tolist(),
        "target": p_tgt.tolist(),
        "transformed": p_trf.tolist(),
        "out_of_range": {
            "source": [u_s, o_s],
            "target": [u_t, o_t],
            "transformed": [u_x, o_x],
        },
        "chi2": chi2,
        "ks": ks,
    }


@dataclass
class EvalReport:
    features: list
    observables: list
    correlations: dict
    classifier: dict
    config_echo: dict
    seed: int

    def to_dict(self) -> dict:
        corr = {
            k: (v.tolist() if isinstance(v, np.ndarray) else v)
            for k, v in self.correlations.items()
        }
        return {
            "features": self.features,
            "observables": self.observables,
            "correlations": corr,
            "classifier": self.classifier,
            "config_echo": self.config_echo,
            "seed": self.seed,
        }

    def write_json(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_csv_panels(self, directory):
        """One CSV per histogram panel and per ROC curve."""
        import os

        os.makedirs(directory, exist_ok=True)
        for panel in self.features + self.observables:
            path = os.path.join(directory, f"hist_{panel['name']}.csv")
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["bin_lo", "bin_hi", "source", "target", "transformed"])
                edges = panel["edges"]
                for b in range(len(edges) - 1):
                    writer.writerow(
                        [edges[b], edges[b + 1], panel["source"][b],
                         panel["target"][b], panel["transformed"][b]]
                    )
        for key in ("roc_target", "roc_transformed"):
            curve = self.classifier.get(key)
            if not curve:
                continue
            path = os.path.join(directory, f"{key}.csv")
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(["fpr", "tpr"])
                for f, t in zip(curve["fpr"], curve["tpr"]):
                    writer.writerow([f, t])


def build_report(target: EventTable, transformed: EventTable, source: EventTable = None,
                 observable_specs=(), classifier_spec: ClassifierSpec = None,
                 bins: int = 40, seed: int = 0, config_echo=None) -> EvalReport:
    """Full closure report; the transfer test runs when a source is given."""
    schema = target.schema
    sent_t = target.sentinel_matrix()
    sent_x = transformed.sentinel_matrix()
    sent_s = source.sentinel_matrix() if source is not None else None

    features = []
    for j, feat in enumerate(schema.features):
        tgt_vals = target.rows[~sent_t[:, j], j]
        trf_vals = transformed.rows[~sent_x[:, j], j]
        src_vals = source.rows[~sent_s[:, j], j] if source is not None else trf_vals
        pooled = np.concatenate([tgt_vals, trf_vals])
        spec = ls.percentile_histogram_spec(pooled, bins=bins)
        features.append(_feature_panel(feat.name, spec, src_vals, tgt_vals, trf_vals))

    observables = []
    for spec_o in observable_specs:
        tgt_vals = spec_o.evaluate(ad.Tensor(target.rows)).values
        trf_vals = spec_o.evaluate(ad.Tensor(transformed.rows)).values
        src_vals = (
            spec_o.evaluate(ad.Tensor(source.rows)).values if source is not None else trf_vals
        )
        hspec = spec_o.histogram or ls.percentile_histogram_spec(
            np.concatenate([tgt_vals, trf_vals]), bins=bins
        )
        observables.append(_feature_panel(spec_o.name, hspec, src_vals, tgt_vals, trf_vals))

    correlations = correlation_report(target, transformed)

    classifier = {}
    if classifier_spec is not None:
        value, roc, _ = two_sample_test(target, transformed, classifier_spec, seed)
        classifier = {
            "auc_target_vs_transformed": value,
            "roc": {k: v.tolist() for k, v in roc.items()},
        }
        if source is not None:
            transfer = transfer_roc_test(source, target, transformed, classifier_spec, seed)
            classifier["transfer"] = {
                "auc_target": transfer["auc_target"],
                "auc_transformed": transfer["auc_transformed"],
                "delta_auc": transfer["delta_auc"],
            }
            classifier["roc_target"] = {
                k: v.tolist() for k, v in transfer["roc_target"].items()
            }
            classifier["roc_transformed"] = {
                k: v.tolist() for k, v in transfer["roc_transformed"].items()
            }

    return EvalReport(
        features=features,
        observables=observables,
        correlations=correlations,
        classifier=classifier,
        config_echo=config_echo or {},
        seed=seed,
    )


# ---------------------------------------------------------------------------
# Quantile-mapping baseline


def quantile_map_feature(source_vals, target_vals, query=None) -> np.ndarray:
    """x' = F_target^-1(F_source(x)) via plotting positions (k-1/2)/n and
    linear interpolation; matches the marginal, ignores correlations."""
    source_vals = np.asarray(source_vals, dtype=np.float64)
    src = np.sort(source_vals)
    tgt = np.sort(np.asarray(target_vals, dtype=np.float64))
    if src.size == 0 or tgt.size == 0:
        raise EvaluationError("quantile mapping needs nonempty samples")
    # default query: the source values in their original row order
    query = source_vals if query is None else np.asarray(query, dtype=np.float64)
    u = np.interp(query, src, (np.arange(src.size) + 0.5) / src.size)
    return np.interp(u, (np.arange(tgt.size) + 0.5) / tgt.size, tgt)


def quantile_baseline(source: EventTable, target: EventTable, features=None,
                      exclude_sentinels: bool = False) -> EventTable:
    """Per-feature quantile mapping of the source table onto the target."""
    if source.schema != target.schema:
        raise EvaluationError("quantile_baseline requires a shared schema")
    schema = source.schema
    names = [f.name for f in schema.features] if features is None else list(features)
    sent_s = source.sentinel_matrix()
    sent_t = target.sentinel_matrix()
    rows = source.rows.copy()
    for name in names:
        j = schema.index(name)
        has_sentinels = sent_s[:, j].any() or sent_t[:, j].any()
        if has_sentinels and not exclude_sentinels:
            raise EvaluationError(
                f"feature {name!r} carries padding sentinels; "
                "pass exclude_sentinels to map only the real entries"
            )
        keep = ~sent_s[:, j]
        rows[keep, j] = quantile_map_feature(
            source.rows[keep, j], target.rows[~sent_t[:, j], j]
        )
    return EventTable(schema, rows, provenance="transformed", seed=source.seed)
