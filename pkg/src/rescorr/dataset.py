"""Event-sample data model, IO, standardization and toy generation.

An EventTable is an N x d float64 matrix with a FeatureSchema.  Absent
optional objects are padded with exact 0.0, which every downstream stage
treats as a protected sentinel for features flagged ``zero_protected``.

The toy generator draws correlated samples through a Gaussian copula:
z ~ N(0, R), u = Phi(z), x_j = F_j^{-1}(u_j).  With Gaussian marginals
the empirical correlation converges to R exactly, giving the closure
tests an exact ground truth.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

FEATURE_KINDS = ("momentum", "pseudorapidity", "azimuth", "energy", "other")

BINARY_MAGIC = b"RCEVT001"


class DatasetError(Exception):
    pass


class SchemaError(DatasetError):
    pass


class ParseError(DatasetError):
    pass


@dataclass(frozen=True)
class Feature:
    name: str
    kind: str = "other"
    alpha: float = 0.5
    weight: float = 1.0
    mask: int = 1
    zero_protected: bool = False

    def __post_init__(self):
        if self.kind not in FEATURE_KINDS:
            raise SchemaError(f"unknown feature kind {self.kind!r} for {self.name!r}")
        if self.alpha < 0:
            raise SchemaError(f"alpha must be >= 0 for {self.name!r}")
        if self.weight < 0:
            raise SchemaError(f"weight must be >= 0 for {self.name!r}")
        if self.mask not in (0, 1):
            raise SchemaError(f"mask must be 0 or 1 for {self.name!r}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "kind": self.kind,
            "alpha": self.alpha,
            "weight": self.weight,
            "mask": self.mask,
            "zero_protected": self.zero_protected,
        }

    @staticmethod
    def from_dict(d: dict) -> "Feature":
        return Feature(
            name=d["name"],
            kind=d.get("kind", "other"),
            alpha=float(d.get("alpha", 0.5)),
            weight=float(d.get("weight", 1.0)),
            mask=int(d.get("mask", 1)),
            zero_protected=bool(d.get("zero_protected", False)),
        )


@dataclass(frozen=True)
class FeatureSchema:
    features: tuple

    def __post_init__(self):
        names = [f.name for f in self.features]
        if len(set(names)) != len(names):
            raise SchemaError("feature names must be unique")

    @property
    def d(self) -> int:
        return len(self.features)

    @property
    def names(self):
        return [f.name for f in self.features]

    def index(self, name: str) -> int:
        for i, f in enumerate(self.features):
            if f.name == name:
                return i
        raise SchemaError(f"no feature named {name!r}")

    def alphas(self) -> np.ndarray:
        return np.array([f.alpha for f in self.features])

    def weights(self) -> np.ndarray:
        return np.array([f.weight for f in self.features])

    def mask_vector(self) -> np.ndarray:
        return np.array([float(f.mask) for f in self.features])

    def zero_protected_flags(self) -> np.ndarray:
        return np.array([f.zero_protected for f in self.features], dtype=bool)

    def azimuth_flags(self) -> np.ndarray:
        return np.array([f.kind == "azimuth" for f in self.features], dtype=bool)

    def to_dict(self) -> dict:
        return {"features": [f.to_dict() for f in self.features]}

    @staticmethod
    def from_dict(d: dict) -> "FeatureSchema":
        return FeatureSchema(tuple(Feature.from_dict(f) for f in d["features"]))

    def content_hash(self) -> str:
        import hashlib

        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def schema_from_names(names, kinds=None, **kwargs) -> FeatureSchema:
    kinds = kinds or ["other"] * len(names)
    return FeatureSchema(tuple(Feature(n, k, **kwargs) for n, k in zip(names, kinds)))


class EventTable:
    """Immutable N x d sample with schema and provenance."""

    def __init__(self, schema: FeatureSchema, rows, provenance: str = "source", seed: int = 0):
        rows = np.array(rows, dtype=np.float64, copy=True)
        if rows.ndim != 2:
            rows = rows.reshape(-1, schema.d)
        if rows.shape[1] != schema.d:
            raise SchemaError(f"rows have {rows.shape[1]} columns, schema has {schema.d}")
        rows.setflags(write=False)
        self.schema = schema
        self.rows = rows
        self.provenance = provenance
        self.seed = int(seed)

    @property
    def n(self) -> int:
        return self.rows.shape[0]

    @property
    def d(self) -> int:
        return self.rows.shape[1]

    def column(self, name: str) -> np.ndarray:
        return self.rows[:, self.schema.index(name)]

    def with_rows(self, rows, provenance=None) -> "EventTable":
        return EventTable(self.schema, rows, provenance or self.provenance, self.seed)

    def take(self, idx) -> "EventTable":
        return EventTable(self.schema, self.rows[idx], self.provenance, self.seed)

    def sentinel_matrix(self) -> np.ndarray:
        """Boolean N x d matrix of protected padding sentinels."""
        prot = self.schema.zero_protected_flags()
        return (self.rows == 0.0) & prot[None, :]


class Standardizer:
    """Per-feature affine standardization fit on the source sample.

    Azimuth features pass through untouched; protected 0.0 sentinels are
    fixed points of both directions.
    """

    def __init__(self, mean: np.ndarray, scale: np.ndarray, schema: FeatureSchema):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)
        self.schema = schema
        if np.any(self.scale <= 0):
            raise DatasetError("standardizer scales must be positive")

    def transform(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        out = (rows - self.mean[None, :]) / self.scale[None, :]
        prot = self.schema.zero_protected_flags()
        if prot.any():
            sentinel = (rows == 0.0) & prot[None, :]
            out = np.where(sentinel, 0.0, out)
        return out

    def inverse(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        out = rows * self.scale[None, :] + self.mean[None, :]
        prot = self.schema.zero_protected_flags()
        if prot.any():
            sentinel = (rows == 0.0) & prot[None, :]
            out = np.where(sentinel, 0.0, out)
        return out

    def to_dict(self) -> dict:
        return {
            "mean": [format(v, ".17g") for v in self.mean],
            "scale": [format(v, ".17g") for v in self.scale],
        }

    @staticmethod
    def from_dict(d: dict, schema: FeatureSchema) -> "Standardizer":
        return Standardizer(
            np.array([float(v) for v in d["mean"]]),
            np.array([float(v) for v in d["scale"]]),
            schema,
        )


def fit_standardizer(table: EventTable) -> Standardizer:
    if table.n < 2:
        raise DatasetError("need at least 2 events to fit a standardizer")
    mean = np.zeros(table.d)
    scale = np.ones(table.d)
    sentinel = table.sentinel_matrix()
    for j, feat in enumerate(table.schema.features):
        if feat.kind == "azimuth":
            continue  # periodic: identity transform
        colv = table.rows[:, j]
        keep = ~sentinel[:, j]
        if keep.sum() < 2:
            raise DatasetError(f"feature {feat.name!r} has fewer than 2 non-sentinel entries")
        vals = colv[keep]
        mean[j] = vals.mean()
        scale[j] = max(vals.std(), 1e-8)
    return Standardizer(mean, scale, table.schema)


# ---------------------------------------------------------------------------
# IO


def _sidecar_path(path: str) -> str:
    return str(path) + ".meta.json"


def write_events(table: EventTable, path: str, format: str = "binary") -> None:
    path = str(path)
    if format == "csv":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(",".join(table.schema.names) + "\n")
            for row in table.rows:
                fh.write(",".join(format_float(v) for v in row) + "\n")
    elif format == "binary":
        with open(path, "wb") as fh:
            fh.write(BINARY_MAGIC)
            fh.write(struct.pack("<QQ", table.d, table.n))
            fh.write(np.ascontiguousarray(table.rows, dtype="<f8").tobytes())
    else:
        raise DatasetError(f"unknown format {format!r}")
    meta = {
        "schema": table.schema.to_dict(),
        "provenance": table.provenance,
        "seed": table.seed,
    }
    with open(_sidecar_path(path), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)


def format_float(v: float) -> str:
    return format(v, ".17g")


def read_events(path: str, format: str = "binary", schema: FeatureSchema | None = None) -> EventTable:
    path = str(path)
    meta = None
    try:
        with open(_sidecar_path(path), "r", encoding="utf-8") as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        pass
    if schema is None and meta is not None:
        schema = FeatureSchema.from_dict(meta["schema"])

    if format == "csv":
        table = _read_csv(path, schema)
    elif format == "binary":
        table = _read_binary(path, schema)
    else:
        raise DatasetError(f"unknown format {format!r}")
    if meta is not None:
        table.provenance = meta.get("provenance", table.provenance)
        table.seed = int(meta.get("seed", 0))
    return table


def _read_csv(path: str, schema: FeatureSchema | None) -> EventTable:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ParseError(f"{path}: no data rows")
    header = lines[0].split(",")
    if schema is None:
        schema = schema_from_names(header)
    else:
        if header != schema.names:
            raise SchemaError(f"{path}: header {header} does not match schema {schema.names}")
    rows = np.empty((len(lines) - 1, len(header)))
    for r, line in enumerate(lines[1:]):
        cells = line.split(",")
        if len(cells) != len(header):
            raise ParseError(f"{path}: row {r} has {len(cells)} cells, expected {len(header)}")
        for c, cell in enumerate(cells):
            try:
                rows[r, c] = float(cell)
            except ValueError:
                raise ParseError(f"{path}: non-numeric cell at row {r}, column {c}: {cell!r}")
    return EventTable(schema, rows)


def _read_binary(path: str, schema: FeatureSchema | None) -> EventTable:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 24 or blob[:8] != BINARY_MAGIC:
        raise ParseError(f"{path}: not a RCEVT001 file")
    d, n = struct.unpack("<QQ", blob[8:24])
    expected = 24 + 8 * d * n
    if len(blob) != expected:
        raise ParseError(f"{path}: truncated payload ({len(blob)} bytes, expected {expected})")
    rows = np.frombuffer(blob, dtype="<f8", offset=24).reshape(n, d)
    if schema is None:
        raise SchemaError(f"{path}: binary file without sidecar metadata needs an explicit schema")
    return EventTable(schema, rows)


# ---------------------------------------------------------------------------
# Toy generation


@dataclass(frozen=True)
class MarginalSpec:
    """One-dimensional marginal for the copula toy.

    kinds: lognormal(mu, sigma) for momentum-like features,
    normal(mu, sigma) for pseudorapidity-like, uniform_angle for azimuth.
    """

    kind: str
    mu: float = 0.0
    sigma: float = 1.0

    def ppf(self, u: np.ndarray) -> np.ndarray:
        if self.kind == "lognormal":
            return stats.lognorm.ppf(u, s=self.sigma, scale=math.exp(self.mu))
        if self.kind == "normal":
            return self.mu + self.sigma * stats.norm.ppf(u)
        if self.kind == "uniform_angle":
            return -np.pi + 2.0 * np.pi * u
        raise DatasetError(f"unknown marginal kind {self.kind!r}")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "mu": self.mu, "sigma": self.sigma}

    @staticmethod
    def from_dict(d: dict) -> "MarginalSpec":
        return MarginalSpec(d["kind"], float(d.get("mu", 0.0)), float(d.get("sigma", 1.0)))


@dataclass(frozen=True)
class ToyConfig:
    marginals: tuple
    correlation: np.ndarray
    padded_objects: tuple = ()  # ((feature indices...), probability) pairs
    seed: int = 0

    @property
    def d(self) -> int:
        return len(self.marginals)

    def validate(self):
        R = np.asarray(self.correlation, dtype=np.float64)
        if R.shape != (self.d, self.d):
            raise DatasetError(f"correlation matrix shape {R.shape} does not match d={self.d}")
        if not np.allclose(R, R.T, atol=1e-12):
            raise DatasetError("correlation matrix must be symmetric")
        if not np.allclose(np.diag(R), 1.0, atol=1e-12):
            raise DatasetError("correlation matrix must have unit diagonal")
        if np.linalg.eigvalsh(R).min() <= 0:
            raise DatasetError("correlation matrix must be positive definite")
        return R

    def to_dict(self) -> dict:
        return {
            "marginals": [m.to_dict() for m in self.marginals],
            "correlation": np.asarray(self.correlation).tolist(),
            "padded_objects": [
                {"indices": list(ix), "prob": p} for ix, p in self.padded_objects
            ],
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "ToyConfig":
        return ToyConfig(
            marginals=tuple(MarginalSpec.from_dict(m) for m in d["marginals"]),
            correlation=np.array(d["correlation"], dtype=np.float64),
            padded_objects=tuple(
                (tuple(int(i) for i in po["indices"]), float(po["prob"]))
                for po in d.get("padded_objects", [])
            ),
            seed=int(d.get("seed", 0)),
        )


def sample_toy(cfg: ToyConfig, n: int, schema: FeatureSchema, provenance: str = "source") -> EventTable:
    """Draw n events from the Gaussian-copula toy configuration."""
    R = cfg.validate()
    try:
        L = np.linalg.cholesky(R)
    except np.linalg.LinAlgError as exc:
        raise DatasetError(f"correlation matrix is not positive definite: {exc}")
    rng = np.random.default_rng(cfg.seed)
    z = rng.standard_normal((n, cfg.d)) @ L.T
    u = stats.norm.cdf(z)
    # keep u strictly inside (0, 1) so every ppf stays finite
    u = np.clip(u, 1e-12, 1.0 - 1e-12)
    rows = np.empty((n, cfg.d))
    for j, m in enumerate(cfg.marginals):
        rows[:, j] = m.ppf(u[:, j])
    for indices, prob in cfg.padded_objects:
        drop = rng.random(n) < prob
        for j in indices:
            rows[drop, j] = 0.0
    return EventTable(schema, rows, provenance=provenance, seed=cfg.seed)


def generate_toy_pair(cfg_source: ToyConfig, cfg_target: ToyConfig, n: int, schema: FeatureSchema):
    """Source/target sample pair with controlled marginal and correlation
    differences; deterministic given the configs' seeds."""
    if cfg_source.d != cfg_target.d or cfg_source.d != schema.d:
        raise DatasetError("source, target and schema must share the feature count")
    source = sample_toy(cfg_source, n, schema, provenance="source")
    target = sample_toy(cfg_target, n, schema, provenance="target")
    return source, target
