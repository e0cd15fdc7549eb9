"""Training orchestration: Adam minibatch loops with early stopping over
the global, per-feature and two-step pipelines.

Everything is seeded and single-threaded, so repeated runs produce
bit-identical models and logs.  Large batches keep the soft-histogram
estimates stable; the floor is enforced unless explicitly acknowledged.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import losses as ls
from . import models as md
from .dataset import EventTable, fit_standardizer

BATCH_FLOOR = 5001


class TrainingError(Exception):
    pass


class TrainingDiverged(TrainingError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8192
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    max_epochs: int = 200
    patience: int = 5
    split_fraction: float = 0.8
    seed: int = 0
    weights: ls.LossWeights = field(default_factory=ls.LossWeights)
    mode: str = "global"
    allow_small_batch: bool = False
    hidden_global: tuple = md.HIDDEN_GLOBAL
    hidden_feature: tuple = md.HIDDEN_FEATURE
    histogram_bins: int = 40
    temperature: float = 0.1
    skip_stage2: bool = False

    def __post_init__(self):
        if self.batch_size < BATCH_FLOOR and not self.allow_small_batch:
            raise TrainingError(
                f"batch_size {self.batch_size} is below the stability floor "
                f"{BATCH_FLOOR}; set allow_small_batch to override"
            )
        if not 0 < self.split_fraction < 1:
            raise TrainingError("split_fraction must be in (0, 1)")
        if self.mode not in ("global", "twostep"):
            raise TrainingError(f"unknown training mode {self.mode!r}")

    def to_dict(self) -> dict:
        d = {
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "max_epochs": self.max_epochs,
            "patience": self.patience,
            "split_fraction": self.split_fraction,
            "seed": self.seed,
            "weights": self.weights.to_dict(),
            "mode": self.mode,
            "allow_small_batch": self.allow_small_batch,
            "hidden_global": list(self.hidden_global),
            "hidden_feature": list(self.hidden_feature),
            "histogram_bins": self.histogram_bins,
            "temperature": self.temperature,
            "skip_stage2": self.skip_stage2,
        }
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        kwargs = dict(d)
        if "weights" in kwargs:
            kwargs["weights"] = ls.LossWeights.from_dict(kwargs["weights"])
        if "hidden_global" in kwargs:
            kwargs["hidden_global"] = tuple(kwargs["hidden_global"])
        if "hidden_feature" in kwargs:
            kwargs["hidden_feature"] = tuple(kwargs["hidden_feature"])
        return TrainConfig(**kwargs)


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    best_val: float = float("inf")
    stop_reason: str = ""

    def to_dict(self) -> dict:
        return {
            "epochs": self.epochs,
            "best_epoch": self.best_epoch,
            "best_val": self.best_val,
            "stop_reason": self.stop_reason,
        }

    def write_jsonl(self, path):
        """One line per batch plus one validation line per epoch."""
        with open(path, "w", encoding="utf-8") as fh:
            for entry in self.epochs:
                for b, terms in enumerate(entry["batches"]):
                    fh.write(json.dumps({"epoch": entry["epoch"], "batch": b, **terms}) + "\n")
                fh.write(
                    json.dumps({"epoch": entry["epoch"], "validation": entry["val"]}) + "\n"
                )
            fh.write(json.dumps({"best_epoch": self.best_epoch, "stop_reason": self.stop_reason}) + "\n")


def split_train_val(table: EventTable, fraction: float, seed: int):
    """Deterministic shuffled split; disjoint and exhaustive."""
    if table.n < 10:
        raise TrainingError(f"sample too small to split (N={table.n})")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(table.n)
    cut = int(round(table.n * fraction))
    return table.take(perm[:cut]), table.take(perm[cut:])


def split_indices(n: int, fraction: float, seed: int):
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    cut = int(round(n * fraction))
    return perm[:cut], perm[cut:]


class AdamState:
    def __init__(self, params):
        self.m = [np.zeros_like(p.values) for p in params]
        self.v = [np.zeros_like(p.values) for p in params]
        self.t = 0

    def to_dict(self):
        return {
            "m": [a.tolist() for a in self.m],
            "v": [a.tolist() for a in self.v],
            "t": self.t,
        }

    @staticmethod
    def from_dict(d, params):
        state = AdamState(params)
        state.m = [np.array(a) for a in d["m"]]
        state.v = [np.array(a) for a in d["v"]]
        state.t = int(d["t"])
        return state


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-8, t=None):
    """Bias-corrected adaptive-moment update, one tensor at a time."""
    if t is None:
        state.t += 1
        t = state.t
    else:
        state.t = t
    for k, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            g = np.zeros_like(p.values)
        state.m[k] = beta1 * state.m[k] + (1 - beta1) * g
        state.v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        mhat = state.m[k] / (1 - beta1**t)
        vhat = state.v[k] / (1 - beta2**t)
        p.values = p.values - lr * mhat / (np.sqrt(vhat) + eps)


def _batch_diagnostics(rows: np.ndarray) -> dict:
    return {
        "mean": rows.mean(axis=0).tolist(),
        "min": rows.min(axis=0).tolist(),
        "max": rows.max(axis=0).tolist(),
    }


def optimize(model, train_rows, train_sentinel, val_rows, val_sentinel, loss_fn, config: TrainConfig,
             checkpoint_path=None, resume=False):
    """Shared minibatch loop with early stopping and best-model restore.

    loss_fn(rows, sentinel) must build the scalar objective inside the
    active tape and return (Tensor, term breakdown).
    """
    params = model.parameters()
    state = AdamState(params)
    log = TrainLog()
    rng = np.random.default_rng(config.seed + 77_003)
    best = md.snapshot_parameters(model)
    bad = 0
    start_epoch = 0

    if resume and checkpoint_path is not None:
        loaded = _load_checkpoint(checkpoint_path, model, params, state, log, rng)
        if loaded is not None:
            start_epoch, best, bad = loaded

    n = train_rows.shape[0]
    n_batches = max(n // config.batch_size, 1)

    for epoch in range(start_epoch, config.max_epochs):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        batch_terms = []
        for b in range(n_batches):
            idx = perm[b * config.batch_size : (b + 1) * config.batch_size]
            rows = train_rows[idx]
            sent = train_sentinel[idx]
            with ad.Tape() as tape:
                total, terms = loss_fn(rows, sent)
                value = total.item()
                if not np.isfinite(value):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch}, batch {b}; "
                        f"batch statistics: {json.dumps(_batch_diagnostics(rows))}"
                    )
                tape.backward(total)
            grads = [p.grad_array() for p in params]
            adam_step(params, grads, state, config.learning_rate, config.beta1, config.beta2, config.eps)
            for p in params:
                p.zero_grad()
            batch_terms.append(terms)

        val_total, val_terms = loss_fn(val_rows, val_sentinel)
        val_value = val_total.item()
        if not np.isfinite(val_value):
            raise TrainingDiverged(f"non-finite validation loss at epoch {epoch}")
        log.epochs.append(
            {
                "epoch": epoch,
                "batches": batch_terms,
                "val": val_terms,
                "wall_time": time.perf_counter() - t0,
            }
        )
        if val_value < log.best_val:
            log.best_val = val_value
            log.best_epoch = epoch
            best = md.snapshot_parameters(model)
            bad = 0
        else:
            bad += 1
            if bad >= config.patience:
                log.stop_reason = f"no improvement for {config.patience} epochs"
                if checkpoint_path is not None:
                    _save_checkpoint(checkpoint_path, epoch, model, state, log, rng, best, bad)
                break
        if checkpoint_path is not None:
            _save_checkpoint(checkpoint_path, epoch, model, state, log, rng, best, bad)
    else:
        log.stop_reason = "max_epochs reached"

    md.restore_parameters(model, best)
    restored_val, _ = loss_fn(val_rows, val_sentinel)
    if abs(restored_val.item() - log.best_val) > 1e-12 * max(1.0, abs(log.best_val)):
        raise TrainingError("restored model does not reproduce the best validation loss")
    return log


def _save_checkpoint(path, epoch, model, state, log, rng, best, bad):
    doc = {
        "epoch": epoch,
        "params": [p.values.tolist() for p in model.parameters()],
        "best": [b.tolist() for b in best],
        "adam": state.to_dict(),
        "rng_state": rng.bit_generator.state,
        "log": log.to_dict(),
        "bad": bad,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)


def _load_checkpoint(path, model, params, state, log, rng):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        return None
    for p, values in zip(params, doc["params"]):
        p.values = np.array(values)
    loaded_state = AdamState.from_dict(doc["adam"], params)
    state.m, state.v, state.t = loaded_state.m, loaded_state.v, loaded_state.t
    rng.bit_generator.state = doc["rng_state"]
    saved_log = doc["log"]
    log.epochs.extend(saved_log["epochs"])
    log.best_epoch = saved_log["best_epoch"]
    log.best_val = saved_log["best_val"]
    best = [np.array(b) for b in doc["best"]]
    return doc["epoch"] + 1, best, doc["bad"]


# ---------------------------------------------------------------------------
# Template preparation


def _feature_values(rows, sentinel, j):
    return rows[~sentinel[:, j], j]


def build_feature_templates(z_source, z_target, sentinel_source, sentinel_target, schema, config):
    """Per-feature soft-histogram templates of the standardized target;
    ranges from percentiles of the pooled source+target sample."""
    templates = {}
    for j, feat in enumerate(schema.features):
        if not feat.mask:
            continue
        pooled = np.concatenate(
            [_feature_values(z_source, sentinel_source, j), _feature_values(z_target, sentinel_target, j)]
        )
        spec = ls.percentile_histogram_spec(
            pooled, bins=config.histogram_bins, temperature=config.temperature
        )
        templates[feat.name] = ls.TargetTemplate.from_values(
            _feature_values(z_target, sentinel_target, j), spec
        )
    return templates


def build_observable_templates(source: EventTable, target: EventTable, observable_specs, config):
    """Templates in physical units; ranges pooled over source and target."""
    templates = {}
    resolved = []
    for spec in observable_specs:
        src_vals = spec.evaluate(ad.Tensor(source.rows)).values
        tgt_vals = spec.evaluate(ad.Tensor(target.rows)).values
        hspec = spec.histogram
        if hspec is None:
            hspec = ls.percentile_histogram_spec(
                np.concatenate([src_vals, tgt_vals]),
                bins=config.histogram_bins,
                temperature=config.temperature,
            )
        templates[spec.name] = ls.TargetTemplate.from_values(tgt_vals, hspec)
        resolved.append(spec)
    return tuple(resolved), templates


# ---------------------------------------------------------------------------
# Pipelines


def _prepare(source: EventTable, target: EventTable, config: TrainConfig):
    if source.schema != target.schema:
        raise TrainingError("source and target must share a schema")
    std = fit_standardizer(source)
    z_s = std.transform(source.rows)
    z_t = std.transform(target.rows)
    sent_s = source.sentinel_matrix()
    sent_t = target.sentinel_matrix()
    return std, z_s, z_t, sent_s, sent_t


def train_global(source: EventTable, target: EventTable, config: TrainConfig,
                 observable_specs=(), checkpoint_path=None, resume=False):
    """Global residual model under the four-term composite loss; the
    correlation reference is the source batch."""
    schema = source.schema
    std, z_s, z_t, sent_s, sent_t = _prepare(source, target, config)
    templates = build_feature_templates(z_s, z_t, sent_s, sent_t, schema, config)
    obs_specs, obs_templates = build_observable_templates(source, target, observable_specs, config)

    objective = ls.CompositeObjective(
        schema, std, config.weights, mode="global",
        feature_templates=templates,
        observable_specs=obs_specs,
        observable_templates=obs_templates,
    )
    model = md.GlobalResidualModel.create(schema, config.hidden_global, seed=config.seed)

    train_idx, val_idx = split_indices(source.n, config.split_fraction, config.seed)

    def loss_fn(rows, sent):
        x = ad.Tensor(rows)
        x_prime = model.forward(x)
        return objective(x, x_prime, sent)

    log = optimize(
        model, z_s[train_idx], sent_s[train_idx], z_s[val_idx], sent_s[val_idx],
        loss_fn, config, checkpoint_path=checkpoint_path, resume=resume,
    )
    return model, std, log


def train_feature(source: EventTable, target: EventTable, j: int, config: TrainConfig,
                  context=None, prepared=None, templates=None):
    """Stage-1 model for feature j: marginal histogram loss plus the
    movement penalty on its own correction."""
    schema = source.schema
    feat = schema.features[j]
    if not feat.mask:
        raise TrainingError(f"feature {feat.name!r} is masked; nothing to train")
    if prepared is None:
        prepared = _prepare(source, target, config)
    std, z_s, z_t, sent_s, sent_t = prepared
    if templates is None:
        templates = build_feature_templates(z_s, z_t, sent_s, sent_t, schema, config)
    template = templates[feat.name]
    context = tuple(context) if context is not None else (j,)
    model = md.FeatureResidualModel.create(
        schema, j, context, hidden=config.hidden_feature, seed=config.seed * 1000 + j
    )
    move_norm = feat.weight / max(feat.alpha, 1e-8) ** 2

    def loss_fn(rows, sent):
        x = ad.Tensor(rows)
        delta = model.delta(x)
        x_prime_j = ad.add(ad.col(x, j), delta)
        keep = ~sent[:, j]
        column = x_prime_j if keep.all() else ad.take(x_prime_j, keep)
        lh = ls.hist_loss(column, template)
        lm = ad.scale(ad.tmean(ad.square(delta)), move_norm)
        total = ad.add(lh, ad.scale(lm, config.weights.move))
        return total, {"L_hist": lh.item(), "L_der": 0.0, "L_move": lm.item(),
                       "L_corr": 0.0, "total": total.item()}

    train_idx, val_idx = split_indices(source.n, config.split_fraction, config.seed)
    log = optimize(
        model, z_s[train_idx], sent_s[train_idx], z_s[val_idx], sent_s[val_idx],
        loss_fn, config,
    )
    return model, log


def train_twostep(source: EventTable, target: EventTable, config: TrainConfig,
                  observable_specs=(), objects=(), stage1_config: TrainConfig = None):
    """Stage 1 per-feature models, then a global refinement driven by
    derived observables, movement and the target correlation matrix."""
    schema = source.schema
    prepared = _prepare(source, target, config)
    std, z_s, z_t, sent_s, sent_t = prepared
    templates = build_feature_templates(z_s, z_t, sent_s, sent_t, schema, config)
    context_sets = md.default_context_sets(schema, objects)
    stage1_config = stage1_config or config

    stage1 = []
    stage1_logs = {}
    for j, feat in enumerate(schema.features):
        if not feat.mask:
            continue
        model_j, log_j = train_feature(
            source, target, j, stage1_config, context=context_sets[j],
            prepared=prepared, templates=templates,
        )
        stage1.append(model_j)
        stage1_logs[feat.name] = log_j

    stage2 = md.GlobalResidualModel.create(schema, config.hidden_global, seed=config.seed + 500_000)
    model = md.TwoStepModel(schema, stage1, stage2)
    log = TrainLog(stop_reason="stage 2 skipped")

    if not config.skip_stage2:
        # stage 1 frozen: precompute its output once
        x1_all = model.forward_stage1(ad.Tensor(z_s)).values
        obs_specs, obs_templates = build_observable_templates(source, target, observable_specs, config)
        objective = ls.CompositeObjective(
            schema, std, config.weights, mode="stage2",
            observable_specs=obs_specs,
            observable_templates=obs_templates,
            corr_reference=ls.pearson_matrix_values(z_t),
        )

        def loss_fn(rows, sent):
            x1 = ad.Tensor(rows)
            x2 = stage2.forward(x1)
            return objective(x1, x2, sent)

        train_idx, val_idx = split_indices(source.n, config.split_fraction, config.seed)
        log = optimize(
            stage2, x1_all[train_idx], sent_s[train_idx], x1_all[val_idx], sent_s[val_idx],
            loss_fn, config,
        )
    return model, std, log, stage1_logs
