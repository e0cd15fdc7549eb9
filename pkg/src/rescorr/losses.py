"""Loss components for the residual transformation.

Four terms: soft-histogram marginal losses, the same applied to derived
observables, a movement penalty normalized by the per-feature correction
bounds, and a correlation penalty (squared Frobenius distance between
Pearson matrices, diagonal excluded).

The soft histogram assigns each entry to bins through sigmoid edge
functions, so adjacent bins telescope and the whole construction is
differentiable in the sample values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .dataset import FeatureSchema, Standardizer

HIST_EPS = 1e-4
SIGMA_EPS = 1e-8


class LossConfigError(Exception):
    pass


@dataclass(frozen=True)
class HistogramSpec:
    lo: float
    hi: float
    bins: int = 40
    temperature: float = 0.1  # sigmoid width as a fraction of bin width

    def __post_init__(self):
        if not self.lo < self.hi:
            raise LossConfigError(f"histogram range [{self.lo}, {self.hi}) is empty")
        if self.bins < 2:
            raise LossConfigError("histogram needs at least 2 bins")
        if self.temperature <= 0:
            raise LossConfigError("temperature must be positive")

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.lo, self.hi, self.bins + 1)

    @property
    def width(self) -> float:
        return (self.hi - self.lo) / self.bins

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "bins": self.bins, "temperature": self.temperature}

    @staticmethod
    def from_dict(d: dict) -> "HistogramSpec":
        return HistogramSpec(
            float(d["lo"]), float(d["hi"]), int(d.get("bins", 40)), float(d.get("temperature", 0.1))
        )


def percentile_histogram_spec(values, bins=40, temperature=0.1, p_lo=0.1, p_hi=99.9) -> HistogramSpec:
    """Range from percentiles of the pooled sample; pads degenerate ranges."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = np.percentile(values, [p_lo, p_hi])
    if hi - lo < 1e-12:
        lo, hi = lo - 0.5, hi + 0.5
    return HistogramSpec(float(lo), float(hi), bins, temperature)


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def soft_histogram_values(values: np.ndarray, spec: HistogramSpec) -> np.ndarray:
    """Numpy-only forward of the soft histogram (template side)."""
    s = _sigmoid((values[:, None] - spec.edges[None, :]) / (spec.temperature * spec.width))
    return np.mean(s[:, :-1] - s[:, 1:], axis=0)


def soft_histogram(x: ad.Tensor, spec: HistogramSpec) -> ad.Tensor:
    """Differentiable soft bin fractions of a 1-D column."""
    if x.values.ndim != 1:
        raise LossConfigError("soft_histogram expects a 1-D column")
    tw = spec.temperature * spec.width
    s = _sigmoid((x.values[:, None] - spec.edges[None, :]) / tw)
    fractions = np.mean(s[:, :-1] - s[:, 1:], axis=0)
    n = x.values.shape[0]
    sprime = s * (1.0 - s)

    def vjp(g):
        h = np.concatenate([g, [0.0]]) - np.concatenate([[0.0], g])
        return ((sprime @ h) / (n * tw),)

    return ad.make_op(fractions, (x,), vjp)


@dataclass(frozen=True)
class TargetTemplate:
    """Normalized soft-histogram fractions of the (fixed) target sample."""

    spec: HistogramSpec
    fractions: np.ndarray

    @staticmethod
    def from_values(values, spec: HistogramSpec) -> "TargetTemplate":
        raw = soft_histogram_values(np.asarray(values, dtype=np.float64), spec)
        total = raw.sum()
        if total <= 0:
            raise LossConfigError("target sample has no mass inside the histogram range")
        return TargetTemplate(spec, raw / total)

    def __post_init__(self):
        q = np.asarray(self.fractions)
        if np.any(q < 0) or abs(q.sum() - 1.0) > 1e-12:
            raise LossConfigError("template fractions must be non-negative and sum to 1")


@dataclass(frozen=True)
class LossWeights:
    hist: float = 1.0
    der: float = 1.0
    move: float = 1.0
    corr: float = 1.0

    def __post_init__(self):
        for name in ("hist", "der", "move", "corr"):
            if getattr(self, name) < 0:
                raise LossConfigError(f"loss weight {name} must be non-negative")

    def to_dict(self) -> dict:
        return {"hist": self.hist, "der": self.der, "move": self.move, "corr": self.corr}

    @staticmethod
    def from_dict(d: dict) -> "LossWeights":
        return LossWeights(
            float(d.get("hist", 1.0)),
            float(d.get("der", 1.0)),
            float(d.get("move", 1.0)),
            float(d.get("corr", 1.0)),
        )


def hist_loss(x: ad.Tensor, template: TargetTemplate) -> ad.Tensor:
    """Epsilon-regularized chi^2-style distance between the soft histogram
    of x and the target template."""
    p = soft_histogram(x, template.spec)
    diff = ad.sub(p, ad.constant(template.fractions))
    inv = ad.constant(1.0 / (template.fractions + HIST_EPS))
    return ad.tsum(ad.mul(ad.square(diff), inv))


def derived_loss(x_phys: ad.Tensor, specs, templates: dict) -> ad.Tensor:
    """Sum of hist losses over observable columns of the physical-units
    tensor; gradients reach the features through the observables."""
    total = ad.Tensor(0.0)
    for spec in specs:
        if spec.name not in templates:
            raise LossConfigError(f"no target template for observable {spec.name!r}")
        column = spec.evaluate(x_phys)
        total = ad.add(total, hist_loss(column, templates[spec.name]))
    return total


def movement_loss(x: ad.Tensor, x_prime: ad.Tensor, schema: FeatureSchema, sentinel=None) -> ad.Tensor:
    """(1/N) sum_ij w_j ((x'_ij - x_ij) / max(alpha_j, eps))^2, protected
    sentinel entries excluded."""
    if x.shape != x_prime.shape:
        raise LossConfigError(f"movement_loss shapes differ: {x.shape} vs {x_prime.shape}")
    n, d = x.shape
    w = schema.weights() / np.maximum(schema.alphas(), SIGMA_EPS) ** 2
    weight = np.broadcast_to(w[None, :], (n, d)).copy()
    if sentinel is not None:
        weight[sentinel] = 0.0
    diff = ad.sub(x_prime, x)
    return ad.scale(ad.tsum(ad.mul(ad.square(diff), ad.constant(weight))), 1.0 / n)


def pearson_matrix(x: ad.Tensor) -> ad.Tensor:
    """Differentiable d x d Pearson correlation matrix of an (N, d) tensor."""
    n, d = x.shape
    if n < 2:
        raise LossConfigError("pearson_matrix needs at least 2 rows")
    ones = ad.constant(np.full((1, n), 1.0 / n))
    mean_row = ad.matmul(ones, x)  # 1 x d
    centered = ad.add_rowvec(x, ad.scale(mean_row, -1.0))
    cov = ad.scale(ad.matmul(ad.transpose(centered), centered), 1.0 / n)
    var_row = ad.matmul(ones, ad.square(centered))  # 1 x d
    std_row = ad.clamp_min(ad.sqrt_clamped(var_row), SIGMA_EPS)
    denom = ad.matmul(ad.transpose(std_row), std_row)
    return ad.div(cov, denom)


def pearson_matrix_values(rows: np.ndarray) -> np.ndarray:
    """Numpy counterpart with the same sigma floor; exact unit diagonal."""
    rows = np.asarray(rows, dtype=np.float64)
    centered = rows - rows.mean(axis=0)
    cov = centered.T @ centered / rows.shape[0]
    std = np.maximum(np.sqrt(np.diag(cov)), SIGMA_EPS)
    rho = cov / np.outer(std, std)
    np.fill_diagonal(rho, 1.0)
    return rho


def corr_loss(x_prime: ad.Tensor, reference: np.ndarray) -> ad.Tensor:
    """Squared Frobenius norm of pearson(x') - reference, diagonal excluded."""
    reference = np.asarray(reference, dtype=np.float64)
    d = x_prime.shape[1]
    if reference.shape != (d, d):
        raise LossConfigError(f"correlation reference shape {reference.shape}, expected {(d, d)}")
    rho = pearson_matrix(x_prime)
    diff = ad.sub(rho, ad.constant(reference))
    off = ad.constant(1.0 - np.eye(d))
    return ad.tsum(ad.mul(ad.square(diff), off))


class CompositeObjective:
    """Weighted combination of the four loss terms for one training mode.

    mode "global": hist + der + move + corr, movement and correlation
    against the source batch.  mode "stage2": der + move + corr with the
    histogram term dropped; the caller supplies the stage-1 output as the
    movement origin and the target correlation matrix as reference.
    """

    def __init__(
        self,
        schema: FeatureSchema,
        standardizer: Standardizer,
        weights: LossWeights,
        mode: str = "global",
        feature_templates=None,
        observable_specs=(),
        observable_templates=None,
        corr_reference=None,
    ):
        if mode not in ("global", "stage2"):
            raise LossConfigError(f"unknown loss mode {mode!r}")
        self.schema = schema
        self.standardizer = standardizer
        self.weights = weights
        self.mode = mode
        self.feature_templates = feature_templates or {}
        self.observable_specs = tuple(observable_specs)
        self.observable_templates = observable_templates or {}
        self.corr_reference = corr_reference

    def to_physical(self, x_std: ad.Tensor, sentinel: np.ndarray) -> ad.Tensor:
        """Differentiable inverse standardization; sentinels stay 0."""
        n, d = x_std.shape
        s = np.broadcast_to(self.standardizer.scale[None, :], (n, d))
        m = np.broadcast_to(self.standardizer.mean[None, :], (n, d))
        gate = np.where(sentinel, 0.0, 1.0)
        phys = ad.add(ad.mul(x_std, ad.constant(s)), ad.constant(m))
        return ad.mul(phys, ad.constant(gate))

    def __call__(self, x_std: ad.Tensor, x_prime: ad.Tensor, sentinel: np.ndarray, movement_from=None):
        """Total loss and per-term breakdown for one batch.

        x_std: the (constant) standardized input batch; x_prime: model
        output; sentinel: boolean matrix of protected entries;
        movement_from: origin of the movement penalty (defaults x_std).
        """
        w = self.weights
        terms = {"L_hist": 0.0, "L_der": 0.0, "L_move": 0.0, "L_corr": 0.0}
        total = ad.Tensor(0.0)

        if self.mode == "global" and w.hist > 0:
            lh = ad.Tensor(0.0)
            for j, feat in enumerate(self.schema.features):
                template = self.feature_templates.get(feat.name)
                if template is None or not feat.mask:
                    continue
                column = ad.col(x_prime, j)
                keep = ~sentinel[:, j]
                if not keep.all():
                    column = ad.take(column, keep)
                lh = ad.add(lh, hist_loss(column, template))
            terms["L_hist"] = lh.item()
            total = ad.add(total, ad.scale(lh, w.hist))

        der_weight = w.der if self.mode == "global" else 1.0
        if self.observable_specs and der_weight > 0:
            phys = self.to_physical(x_prime, sentinel)
            ld = derived_loss(phys, self.observable_specs, self.observable_templates)
            terms["L_der"] = ld.item()
            total = ad.add(total, ad.scale(ld, der_weight))

        if w.move > 0:
            origin = movement_from if movement_from is not None else x_std
            lm = movement_loss(origin, x_prime, self.schema, sentinel)
            terms["L_move"] = lm.item()
            total = ad.add(total, ad.scale(lm, w.move))

        if w.corr > 0:
            reference = self.corr_reference
            if reference is None:
                # global mode default: correlation of the source batch
                reference = pearson_matrix_values(x_std.values)
            lc = corr_loss(x_prime, reference)
            terms["L_corr"] = lc.item()
            total = ad.add(total, ad.scale(lc, w.corr))

        terms["total"] = total.item()
        return total, terms
