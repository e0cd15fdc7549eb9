"""Differentiable derived observables over feature columns.

All functions take and return autodiff Tensors (1-D columns) so that
gradients of an observable-level loss reach the individual features.
Particles are treated as massless: m^2 = 2 pt1 pt2 (cosh(d_eta) - cos(d_phi)).
Clamped square roots carry zero gradient at the clamp, which keeps batch
losses NaN-free.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .dataset import FeatureSchema, SchemaError

OBSERVABLE_KINDS = (
    "invariant_mass_pair",
    "delta_r",
    "vector_pt_sum",
    "scalar_pt_sum",
    "transverse_mass",
)


@dataclass(frozen=True)
class ObjectSpec:
    """A physics object: the (pt, eta, phi) column indices in the schema."""

    name: str
    pt: int
    eta: int
    phi: int
    optional: bool = False

    def __post_init__(self):
        if len({self.pt, self.eta, self.phi}) != 3:
            raise SchemaError(f"object {self.name!r}: pt/eta/phi indices must be distinct")

    def validate(self, schema: FeatureSchema):
        for idx in (self.pt, self.eta, self.phi):
            if not 0 <= idx < schema.d:
                raise SchemaError(f"object {self.name!r}: column {idx} out of range")

    def columns(self, x):
        """(pt, eta, phi) Tensor columns of an (N, d) tensor."""
        return ad.col(x, self.pt), ad.col(x, self.eta), ad.col(x, self.phi)


@dataclass(frozen=True)
class ObservableSpec:
    name: str
    kind: str
    objects: tuple  # ObjectSpec references
    histogram: "object" = None  # HistogramSpec attached by configuration

    def __post_init__(self):
        if self.kind not in OBSERVABLE_KINDS:
            raise SchemaError(f"unknown observable kind {self.kind!r}")
        n = len(self.objects)
        if self.kind in ("invariant_mass_pair", "delta_r", "transverse_mass") and n != 2:
            raise SchemaError(f"{self.kind} needs exactly 2 objects, got {n}")
        if self.kind in ("vector_pt_sum", "scalar_pt_sum") and n < 2:
            raise SchemaError(f"{self.kind} needs at least 2 objects, got {n}")

    def evaluate(self, x):
        """Observable column for an (N, d) tensor in physical units."""
        if self.kind == "invariant_mass_pair":
            a, b = self.objects
            return invariant_mass_pair(*a.columns(x), *b.columns(x))
        if self.kind == "delta_r":
            a, b = self.objects
            _, eta1, phi1 = a.columns(x)
            _, eta2, phi2 = b.columns(x)
            return delta_r(eta1, phi1, eta2, phi2)
        if self.kind == "vector_pt_sum":
            return vector_pt_sum([o.columns(x) for o in self.objects])
        if self.kind == "scalar_pt_sum":
            return scalar_pt_sum([o.columns(x) for o in self.objects])
        if self.kind == "transverse_mass":
            a, b = self.objects
            pt1, _, phi1 = a.columns(x)
            pt2, _, phi2 = b.columns(x)
            return transverse_mass(pt1, phi1, pt2, phi2)
        raise SchemaError(f"unknown observable kind {self.kind!r}")


def invariant_mass_pair(pt1, eta1, phi1, pt2, eta2, phi2):
    """Massless pair mass sqrt(max(0, 2 pt1 pt2 (cosh d_eta - cos d_phi)))."""
    deta = ad.sub(eta1, eta2)
    dphi = ad.wrap_angle(ad.sub(phi1, phi2))
    kin = ad.sub(ad.cosh(deta), ad.cos(dphi))
    m2 = ad.scale(ad.mul(ad.mul(pt1, pt2), kin), 2.0)
    return ad.sqrt_clamped(m2)


def delta_r(eta1, phi1, eta2, phi2):
    deta = ad.sub(eta1, eta2)
    dphi = ad.wrap_angle(ad.sub(phi1, phi2))
    return ad.sqrt_clamped(ad.add(ad.square(deta), ad.square(dphi)))


def vector_pt_sum(objects):
    """|sum_i (pt_i cos phi_i, pt_i sin phi_i)|; padded objects contribute
    exactly (0, 0) because their pt is the 0.0 sentinel."""
    if len(objects) < 2:
        raise SchemaError("vector_pt_sum needs at least 2 objects")
    px = None
    py = None
    for pt, _, phi in objects:
        term_x = ad.mul(pt, ad.cos(phi))
        term_y = ad.mul(pt, ad.sin(phi))
        px = term_x if px is None else ad.add(px, term_x)
        py = term_y if py is None else ad.add(py, term_y)
    return ad.sqrt_clamped(ad.add(ad.square(px), ad.square(py)))


def scalar_pt_sum(objects):
    if len(objects) < 2:
        raise SchemaError("scalar_pt_sum needs at least 2 objects")
    total = None
    for pt, _, _ in objects:
        total = pt if total is None else ad.add(total, pt)
    return total


def transverse_mass(pt_lep, phi_lep, met, phi_met):
    """mT = sqrt(2 pt met (1 - cos d_phi))."""
    dphi = ad.wrap_angle(ad.sub(phi_lep, phi_met))
    one_minus_cos = ad.sub(ad.Tensor(1.0), ad.cos(dphi))
    mt2 = ad.scale(ad.mul(ad.mul(pt_lep, met), one_minus_cos), 2.0)
    return ad.sqrt_clamped(mt2)
