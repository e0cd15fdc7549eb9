"""Bounded residual transformation models.

Every correction is alpha_j * tanh(net output), so |x' - x| <= alpha_j
by construction.  Masked features and protected 0.0 sentinels are exact
fixed points.  Final layers initialize to exactly zero, so a fresh model
is the identity transformation.
"""

from __future__ import annotations

import json
import math

import numpy as np

from . import autodiff as ad
from .dataset import FeatureSchema, Standardizer

HIDDEN_GLOBAL = (256, 256, 256, 256)
HIDDEN_FEATURE = (64, 64)


class ModelError(Exception):
    pass


class MlpParams:
    """Fully connected layers with tanh hidden activations, linear output."""

    def __init__(self, sizes, weights, biases):
        self.sizes = tuple(int(s) for s in sizes)
        self.weights = weights  # list of Tensors (in, out)
        self.biases = biases  # list of Tensors (out,)
        for k in range(len(self.sizes) - 1):
            if weights[k].shape != (self.sizes[k], self.sizes[k + 1]):
                raise ModelError(f"layer {k} weight shape {weights[k].shape}")
            if biases[k].shape != (self.sizes[k + 1],):
                raise ModelError(f"layer {k} bias shape {biases[k].shape}")

    def parameters(self):
        return list(self.weights) + list(self.biases)

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        h = x
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ad.add_rowvec(ad.matmul(h, w), b)
            if k != last:
                h = ad.tanh(h)
        return h


def init_mlp(sizes, seed: int, zero_final: bool = False) -> MlpParams:
    """Uniform Glorot weights, zero biases; deterministic per seed.

    zero_final additionally zeroes the last layer so the bounded residual
    starts exactly at the identity map.
    """
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for k in range(len(sizes) - 1):
        fan_in, fan_out = sizes[k], sizes[k + 1]
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-limit, limit, (fan_in, fan_out))
        if zero_final and k == len(sizes) - 2:
            w = np.zeros_like(w)
        weights.append(ad.Tensor(w, requires_grad=True))
        biases.append(ad.Tensor(np.zeros(fan_out), requires_grad=True))
    return MlpParams(sizes, weights, biases)


def _residual_gate(x_values: np.ndarray, columns, zero_protect) -> np.ndarray:
    """1.0 except where a protected column carries the 0.0 sentinel."""
    gate = np.ones((x_values.shape[0], len(columns)))
    for k, (j, prot) in enumerate(zip(columns, zero_protect)):
        if prot:
            gate[:, k] = np.where(x_values[:, j] == 0.0, 0.0, 1.0)
    return gate


class GlobalResidualModel:
    """Joint bounded residual over all features: x' = x + m*a*tanh(f(x))."""

    kind = "global"

    def __init__(self, schema: FeatureSchema, mlp: MlpParams):
        if mlp.sizes[0] != schema.d or mlp.sizes[-1] != schema.d:
            raise ModelError(f"global mlp must map d={schema.d} to d, got {mlp.sizes}")
        self.schema = schema
        self.mlp = mlp

    @staticmethod
    def create(schema: FeatureSchema, hidden=HIDDEN_GLOBAL, seed: int = 0) -> "GlobalResidualModel":
        sizes = (schema.d, *hidden, schema.d)
        return GlobalResidualModel(schema, init_mlp(sizes, seed, zero_final=True))

    def parameters(self):
        return self.mlp.parameters()

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        if x.shape[1] != self.schema.d:
            raise ModelError(f"input has {x.shape[1]} features, schema has {self.schema.d}")
        bound = self.schema.mask_vector() * self.schema.alphas()
        gate = _residual_gate(
            x.values, range(self.schema.d), self.schema.zero_protected_flags()
        )
        n = x.shape[0]
        factor = np.broadcast_to(bound[None, :], (n, self.schema.d)) * gate
        delta = ad.mul(ad.tanh(self.mlp.forward(x)), ad.constant(factor))
        return ad.add(x, delta)

    def transform(self, rows: np.ndarray) -> np.ndarray:
        return self.forward(ad.Tensor(rows)).values


class FeatureResidualModel:
    """Single-feature bounded residual reading a context column subset."""

    kind = "feature"

    def __init__(self, schema: FeatureSchema, feature: int, context, mlp: MlpParams):
        context = tuple(int(i) for i in context)
        if not context:
            raise ModelError("context set must be non-empty")
        for i in context:
            if not 0 <= i < schema.d:
                raise ModelError(f"context column {i} out of range")
        if mlp.sizes[0] != len(context) or mlp.sizes[-1] != 1:
            raise ModelError(f"feature mlp must map {len(context)} to 1, got {mlp.sizes}")
        self.schema = schema
        self.feature = int(feature)
        self.context = context
        self.mlp = mlp

    @staticmethod
    def create(schema, feature, context, hidden=HIDDEN_FEATURE, seed: int = 0):
        sizes = (len(context), *hidden, 1)
        return FeatureResidualModel(schema, feature, context, init_mlp(sizes, seed, zero_final=True))

    def parameters(self):
        return self.mlp.parameters()

    def delta(self, x: ad.Tensor) -> ad.Tensor:
        """Bounded, gated correction column for the model's feature."""
        feat = self.schema.features[self.feature]
        ctx = ad.gather_cols(x, self.context)
        raw = ad.reshape(self.mlp.forward(ctx), (-1,))
        gate = _residual_gate(x.values, [self.feature], [feat.zero_protected])[:, 0]
        factor = float(feat.mask) * feat.alpha * gate
        return ad.mul(ad.tanh(raw), ad.constant(factor))

    def forward(self, x: ad.Tensor) -> ad.Tensor:
        """Transformed column x'_j = x_j + delta_j(x)."""
        return ad.add(ad.col(x, self.feature), self.delta(x))


class TwoStepModel:
    """Stage 1: per-feature residuals read the original input; stage 2: a
    global refinement on the stage-1 output."""

    kind = "twostep"

    def __init__(self, schema: FeatureSchema, stage1, stage2: GlobalResidualModel):
        self.schema = schema
        self.stage1 = {m.feature: m for m in stage1}
        self.stage2 = stage2

    def parameters(self):
        params = []
        for m in self.stage1.values():
            params.extend(m.parameters())
        params.extend(self.stage2.parameters())
        return params

    def forward_stage1(self, x: ad.Tensor) -> ad.Tensor:
        columns = []
        for j in range(self.schema.d):
            model = self.stage1.get(j)
            columns.append(model.forward(x) if model is not None else ad.col(x, j))
        return ad.stack_cols(columns)

    def forward(self, x: ad.Tensor):
        """(x', x''): both stages' outputs, for diagnostics."""
        x1 = self.forward_stage1(x)
        x2 = self.stage2.forward(x1)
        return x1, x2

    def transform(self, rows: np.ndarray) -> np.ndarray:
        _, x2 = self.forward(ad.Tensor(rows))
        return x2.values


# ---------------------------------------------------------------------------
# Persistence


def _mlp_to_dict(mlp: MlpParams) -> dict:
    return {
        "sizes": list(mlp.sizes),
        "weights": [[format(v, ".17g") for v in w.values.reshape(-1)] for w in mlp.weights],
        "biases": [[format(v, ".17g") for v in b.values] for b in mlp.biases],
    }


def _mlp_from_dict(d: dict) -> MlpParams:
    sizes = tuple(d["sizes"])
    weights, biases = [], []
    for k in range(len(sizes) - 1):
        w = np.array([float(v) for v in d["weights"][k]]).reshape(sizes[k], sizes[k + 1])
        b = np.array([float(v) for v in d["biases"][k]])
        weights.append(ad.Tensor(w, requires_grad=True))
        biases.append(ad.Tensor(b, requires_grad=True))
    return MlpParams(sizes, weights, biases)


def model_to_dict(model, standardizer: Standardizer | None = None) -> dict:
    doc = {
        "kind": model.kind,
        "schema": model.schema.to_dict(),
        "schema_hash": model.schema.content_hash(),
    }
    if standardizer is not None:
        doc["standardizer"] = standardizer.to_dict()
    if model.kind == "global":
        doc["mlp"] = _mlp_to_dict(model.mlp)
    elif model.kind == "feature":
        doc.update(
            {"feature": model.feature, "context": list(model.context), "mlp": _mlp_to_dict(model.mlp)}
        )
    elif model.kind == "twostep":
        doc["stage1"] = [
            {"feature": m.feature, "context": list(m.context), "mlp": _mlp_to_dict(m.mlp)}
            for m in model.stage1.values()
        ]
        doc["stage2"] = _mlp_to_dict(model.stage2.mlp)
    else:
        raise ModelError(f"cannot serialize kind {model.kind!r}")
    return doc


def model_from_dict(doc: dict, expect_kind: str | None = None):
    kind = doc.get("kind")
    if expect_kind is not None and kind != expect_kind:
        raise ModelError(f"model kind {kind!r}, expected {expect_kind!r}")
    schema = FeatureSchema.from_dict(doc["schema"])
    if doc.get("schema_hash") and doc["schema_hash"] != schema.content_hash():
        raise ModelError("schema hash mismatch: file inconsistent with embedded schema")
    standardizer = None
    if "standardizer" in doc:
        standardizer = Standardizer.from_dict(doc["standardizer"], schema)
    if kind == "global":
        model = GlobalResidualModel(schema, _mlp_from_dict(doc["mlp"]))
    elif kind == "feature":
        model = FeatureResidualModel(
            schema, doc["feature"], doc["context"], _mlp_from_dict(doc["mlp"])
        )
    elif kind == "twostep":
        stage1 = [
            FeatureResidualModel(schema, s["feature"], s["context"], _mlp_from_dict(s["mlp"]))
            for s in doc["stage1"]
        ]
        stage2 = GlobalResidualModel(schema, _mlp_from_dict(doc["stage2"]))
        model = TwoStepModel(schema, stage1, stage2)
    else:
        raise ModelError(f"unknown model kind {kind!r}")
    return model, standardizer


def save_model(model, path: str, standardizer: Standardizer | None = None) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(model_to_dict(model, standardizer), fh)


def load_model(path: str, expect_kind: str | None = None, schema: FeatureSchema | None = None):
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ModelError(f"{path}: corrupted model file: {exc}")
    model, standardizer = model_from_dict(doc, expect_kind)
    if schema is not None and schema.content_hash() != model.schema.content_hash():
        raise ModelError(f"{path}: model schema does not match the provided schema")
    return model, standardizer


def snapshot_parameters(model):
    return [p.values.copy() for p in model.parameters()]


def restore_parameters(model, snapshot):
    for p, values in zip(model.parameters(), snapshot):
        p.values = np.array(values, copy=True)
        p.grad = None


def default_context_sets(schema: FeatureSchema, objects=()) -> dict:
    """Stage-1 context: the feature itself plus its physics object's
    features (object-local context); bare features get themselves."""
    groups = {j: {j} for j in range(schema.d)}
    for obj in objects:
        members = {obj.pt, obj.eta, obj.phi}
        for j in members:
            groups[j] |= members
    return {j: tuple(sorted(g)) for j, g in groups.items()}
