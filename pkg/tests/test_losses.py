import numpy as np
import pytest

from rescorr import autodiff as ad
from rescorr import losses as ls
from rescorr import observables as obs
from rescorr.dataset import EventTable, Feature, FeatureSchema, fit_standardizer, schema_from_names
from conftest import check_gradients


def hard_fractions(values, spec):
    counts, _ = np.histogram(values, bins=spec.edges)
    return counts / len(values)


# --- soft histogram -------------------------------------------------------


def test_soft_histogram_saturated_single_value():
    spec = ls.HistogramSpec(0.0, 10.0, 10, temperature=0.05)
    center = 4.5  # center of bin 4
    frac = ls.soft_histogram(ad.Tensor(np.array([center])), spec).values
    assert frac[4] > 0.99
    assert np.all(np.delete(frac, 4) < 0.01)


def test_soft_histogram_edge_split():
    spec = ls.HistogramSpec(0.0, 10.0, 10, temperature=0.05)
    frac = ls.soft_histogram(ad.Tensor(np.array([3.0])), spec).values
    total = frac.sum()
    assert frac[2] == pytest.approx(0.5 * total, rel=1e-6)
    assert frac[3] == pytest.approx(0.5 * total, rel=1e-6)


def test_soft_vs_hard_uniform():
    rng = np.random.default_rng(0)
    spec = ls.HistogramSpec(0.0, 1.0, 20, temperature=0.1)
    x = rng.uniform(0, 1, 10_000)
    soft = ls.soft_histogram(ad.Tensor(x), spec).values
    hard = hard_fractions(x, spec)
    assert np.max(np.abs(soft - hard)) < 0.01


def test_soft_histogram_telescoping():
    rng = np.random.default_rng(1)
    spec = ls.HistogramSpec(-2.0, 2.0, 15, temperature=0.2)
    x = rng.standard_normal(500)
    frac = ls.soft_histogram(ad.Tensor(x), spec).values
    tw = spec.temperature * spec.width
    boundary = np.mean(
        1 / (1 + np.exp(-(x - spec.lo) / tw)) - 1 / (1 + np.exp(-(x - spec.hi) / tw))
    )
    assert abs(frac.sum() - boundary) < 1e-10
    assert frac.sum() <= 1.0 + 1e-12


def test_soft_converges_to_hard_at_low_temperature():
    rng = np.random.default_rng(2)
    spec = ls.HistogramSpec(0.0, 1.0, 10, temperature=0.01)
    tw = spec.temperature * spec.width
    x = rng.uniform(0, 1, 2000)
    # sigmoid tail: agreement to 1e-6 needs ~14 widths of margin; use 20
    dist = np.min(np.abs(x[:, None] - spec.edges[None, :]), axis=1)
    x = x[dist > 20 * tw]
    soft = ls.soft_histogram(ad.Tensor(x), spec).values
    hard = hard_fractions(x, spec)
    assert np.max(np.abs(soft - hard)) < 1e-6


def test_soft_histogram_gradient():
    rng = np.random.default_rng(3)
    spec = ls.HistogramSpec(-1.0, 1.0, 6, temperature=0.3)
    x = rng.uniform(-1, 1, 8)
    weights = rng.standard_normal(7)  # include out-of-range tail weight pattern

    def build(t):
        frac = ls.soft_histogram(t, spec)
        return ad.tsum(ad.mul(frac, ad.constant(weights[:6])))

    check_gradients(build, [x])


# --- hist loss ------------------------------------------------------------


def make_template(values, spec):
    return ls.TargetTemplate.from_values(values, spec)


def test_hist_loss_statistical_floor():
    rng = np.random.default_rng(4)
    spec = ls.HistogramSpec(-3.0, 3.0, 20, temperature=0.1)
    target = rng.standard_normal(10_000)
    template = make_template(target, spec)
    same = rng.standard_normal(10_000)
    loss = ls.hist_loss(ad.Tensor(same), template).item()
    assert loss < 1e-3 * spec.bins


def test_hist_loss_concentrated_vs_uniform():
    spec = ls.HistogramSpec(0.0, 4.0, 4, temperature=0.01)
    template = ls.TargetTemplate(spec, np.full(4, 0.25))
    x = np.full(500, 0.5)  # everything in bin 0
    loss = ls.hist_loss(ad.Tensor(x), template).item()
    expected = (1 - 0.25) ** 2 / (0.25 + ls.HIST_EPS) + 3 * 0.25**2 / (0.25 + ls.HIST_EPS)
    assert loss == pytest.approx(expected, rel=1e-3)
    assert expected == pytest.approx(2.999, abs=0.001)


def test_hist_loss_self_zero():
    spec = ls.HistogramSpec(0.0, 1.0, 5, temperature=0.1)
    rng = np.random.default_rng(5)
    x = rng.uniform(0, 1, 4000)
    raw = ls.soft_histogram_values(x, spec)
    template = ls.TargetTemplate(spec, raw / raw.sum())
    # identical sample against its own (normalized) template: only the
    # boundary-leakage normalization residual remains
    loss = ls.hist_loss(ad.Tensor(x), template).item()
    leak = 1.0 - raw.sum()
    floor = np.sum((template.fractions * leak) ** 2 / (template.fractions + ls.HIST_EPS))
    assert loss == pytest.approx(floor, rel=1e-6)
    assert loss < 5e-3


def test_hist_loss_nonnegative_and_gradient():
    rng = np.random.default_rng(6)
    spec = ls.HistogramSpec(-2.0, 2.0, 8, temperature=0.2)
    template = make_template(rng.standard_normal(2000), spec)
    x = rng.standard_normal(10)
    assert ls.hist_loss(ad.Tensor(x), template).item() >= 0
    check_gradients(lambda t: ls.hist_loss(t, template), [x])


# --- derived loss ---------------------------------------------------------


def pair_setup():
    schema = schema_from_names(
        ["pt1", "eta1", "phi1", "pt2", "eta2", "phi2"],
        ["momentum", "pseudorapidity", "azimuth"] * 2,
    )
    o1 = obs.ObjectSpec("a", 0, 1, 2)
    o2 = obs.ObjectSpec("b", 3, 4, 5)
    spec = obs.ObservableSpec("mass", "invariant_mass_pair", (o1, o2))
    return schema, spec


def sample_rows(rng, n):
    return np.column_stack(
        [
            rng.uniform(10, 60, n),
            rng.standard_normal(n),
            rng.uniform(-np.pi, np.pi, n),
            rng.uniform(10, 60, n),
            rng.standard_normal(n),
            rng.uniform(-np.pi, np.pi, n),
        ]
    )


def test_derived_loss_empty_specs_zero():
    x = ad.Tensor(np.zeros((4, 2)))
    assert ls.derived_loss(x, (), {}).item() == 0.0


def test_derived_loss_missing_template_errors():
    _, spec = pair_setup()
    with pytest.raises(ls.LossConfigError):
        ls.derived_loss(ad.Tensor(np.zeros((4, 6))), (spec,), {})


def test_derived_loss_self_floor():
    rng = np.random.default_rng(7)
    _, spec = pair_setup()
    rows = sample_rows(rng, 10_000)
    mass = spec.evaluate(ad.Tensor(rows)).values
    hspec = ls.percentile_histogram_spec(mass, bins=20)
    templates = {"mass": make_template(mass, hspec)}
    spec = obs.ObservableSpec("mass", spec.kind, spec.objects, hspec)
    loss = ls.derived_loss(ad.Tensor(rows), (spec,), templates).item()
    assert loss < 1e-3 * hspec.bins


def test_derived_loss_gradient_vs_finite_difference():
    rng = np.random.default_rng(8)
    _, spec = pair_setup()
    rows = sample_rows(rng, 2000)
    mass = spec.evaluate(ad.Tensor(rows)).values
    hspec = ls.percentile_histogram_spec(mass, bins=10, temperature=0.3)
    templates = {"mass": make_template(mass, hspec)}
    small = sample_rows(rng, 5)

    def build(t):
        return ls.derived_loss(t, (spec,), templates)

    check_gradients(build, [small])


# --- movement loss --------------------------------------------------------


def test_movement_loss_identity_zero():
    schema = schema_from_names(["a", "b"])
    x = ad.Tensor(np.random.default_rng(9).standard_normal((10, 2)))
    assert ls.movement_loss(x, x, schema).item() == 0.0


def test_movement_loss_shift_equals_bound():
    schema = FeatureSchema((Feature("a", alpha=2.0, weight=1.0),))
    x = ad.Tensor(np.zeros((8, 1)))
    xp = ad.Tensor(np.full((8, 1), 2.0))
    assert ls.movement_loss(x, xp, schema).item() == pytest.approx(1.0)


def test_movement_loss_linear_in_weights():
    rng = np.random.default_rng(10)
    x = ad.Tensor(rng.standard_normal((20, 1)))
    xp = ad.Tensor(x.values + rng.standard_normal((20, 1)) * 0.1)
    l1 = ls.movement_loss(x, xp, FeatureSchema((Feature("a", weight=1.0),))).item()
    l2 = ls.movement_loss(x, xp, FeatureSchema((Feature("a", weight=2.0),))).item()
    assert l2 == pytest.approx(2 * l1)


def test_movement_loss_excludes_sentinels():
    schema = FeatureSchema((Feature("pt", "momentum", alpha=1.0, zero_protected=True),))
    x = np.array([[0.0], [1.0]])
    xp = np.array([[5.0], [1.5]])  # sentinel row moved (hypothetically)
    sentinel = x == 0.0
    loss = ls.movement_loss(ad.Tensor(x), ad.Tensor(xp), schema, sentinel).item()
    assert loss == pytest.approx(0.5**2 / 2)


def test_movement_loss_permutation_invariant():
    rng = np.random.default_rng(11)
    schema = schema_from_names(["a", "b"])
    x = rng.standard_normal((30, 2))
    xp = x + rng.standard_normal((30, 2)) * 0.2
    perm = rng.permutation(30)
    l0 = ls.movement_loss(ad.Tensor(x), ad.Tensor(xp), schema).item()
    l1 = ls.movement_loss(ad.Tensor(x[perm]), ad.Tensor(xp[perm]), schema).item()
    assert l0 == pytest.approx(l1, rel=1e-12)


# --- pearson / correlation loss -------------------------------------------


def test_pearson_perfect_correlation():
    rng = np.random.default_rng(12)
    a = rng.standard_normal(200)
    rows = np.column_stack([a, a, -a])
    rho = ls.pearson_matrix(ad.Tensor(rows)).values
    assert rho[0, 1] == pytest.approx(1.0, abs=1e-12)
    assert rho[0, 2] == pytest.approx(-1.0, abs=1e-12)


def test_pearson_independent_columns():
    rng = np.random.default_rng(13)
    rows = rng.standard_normal((10_000, 3))
    rho = ls.pearson_matrix(ad.Tensor(rows)).values
    off = rho[~np.eye(3, dtype=bool)]
    assert np.max(np.abs(off)) < 0.05


def test_pearson_needs_two_rows():
    with pytest.raises(ls.LossConfigError):
        ls.pearson_matrix(ad.Tensor(np.zeros((1, 2))))


def test_pearson_matches_numpy():
    rng = np.random.default_rng(14)
    rows = rng.standard_normal((500, 4))
    rho = ls.pearson_matrix(ad.Tensor(rows)).values
    assert np.allclose(rho, np.corrcoef(rows, rowvar=False), atol=1e-10)


def test_corr_loss_zero_at_reference():
    rng = np.random.default_rng(15)
    rows = rng.standard_normal((300, 3))
    ref = ls.pearson_matrix_values(rows)
    assert ls.corr_loss(ad.Tensor(rows), ref).item() < 1e-20


def test_corr_loss_closed_form():
    rng = np.random.default_rng(16)
    a = rng.standard_normal(50_000)
    b = 0.5 * a + np.sqrt(1 - 0.25) * rng.standard_normal(50_000)
    rows = np.column_stack([a, b])
    rho12 = ls.pearson_matrix_values(rows)[0, 1]
    ref = np.array([[1.0, 0.3], [0.3, 1.0]])
    loss = ls.corr_loss(ad.Tensor(rows), ref).item()
    assert loss == pytest.approx(2 * (rho12 - 0.3) ** 2, rel=1e-9)


def test_corr_loss_gradient():
    rng = np.random.default_rng(17)
    rows = rng.standard_normal((12, 3))
    ref = np.eye(3)
    check_gradients(lambda t: ls.corr_loss(t, ref), [rows])


def test_corr_loss_shape_mismatch():
    with pytest.raises(ls.LossConfigError):
        ls.corr_loss(ad.Tensor(np.zeros((10, 3))), np.eye(2))


# --- composite ------------------------------------------------------------


def composite_setup(weights, mode="global", rng_seed=18):
    rng = np.random.default_rng(rng_seed)
    schema = schema_from_names(["a", "b"])
    rows = rng.standard_normal((400, 2))
    table = EventTable(schema, rows)
    std = fit_standardizer(table)
    z = std.transform(rows)
    templates = {
        name: make_template(z[:, j], ls.percentile_histogram_spec(z[:, j], bins=10))
        for j, name in enumerate(schema.names)
    }
    objective = ls.CompositeObjective(
        schema,
        std,
        weights,
        mode=mode,
        feature_templates=templates,
        corr_reference=ls.pearson_matrix_values(z) if mode == "stage2" else None,
    )
    return objective, z


def test_composite_all_zero_weights():
    objective, z = composite_setup(ls.LossWeights(0, 0, 0, 0))
    x = ad.Tensor(z)
    total, terms = objective(x, x, np.zeros(z.shape, dtype=bool))
    assert total.item() == 0.0
    assert terms["total"] == 0.0


def test_composite_hist_only_matches_sum():
    objective, z = composite_setup(ls.LossWeights(1, 0, 0, 0))
    rng = np.random.default_rng(19)
    xp = ad.Tensor(z + 0.1 * rng.standard_normal(z.shape))
    total, terms = objective(ad.Tensor(z), xp, np.zeros(z.shape, dtype=bool))
    manual = sum(
        ls.hist_loss(ad.col(xp, j), objective.feature_templates[n]).item()
        for j, n in enumerate(["a", "b"])
    )
    assert total.item() == pytest.approx(manual, rel=1e-12)
    assert terms["L_hist"] == pytest.approx(manual, rel=1e-12)


def test_composite_stage2_ignores_hist():
    objective, z = composite_setup(ls.LossWeights(100.0, 1, 0, 0), mode="stage2")
    rng = np.random.default_rng(20)
    xp = ad.Tensor(z + 0.1 * rng.standard_normal(z.shape))
    total, terms = objective(ad.Tensor(z), xp, np.zeros(z.shape, dtype=bool))
    assert terms["L_hist"] == 0.0


def test_composite_negative_weight_rejected():
    with pytest.raises(ls.LossConfigError):
        ls.LossWeights(-1, 0, 0, 0)


def test_composite_full_gradient_finite_difference():
    # every parameter gradient of the four-term objective on a 2-feature,
    # 8-event batch matches central finite differences
    objective, z = composite_setup(ls.LossWeights(1.0, 0.0, 0.5, 1.0))
    batch = z[:8]
    sentinel = np.zeros(batch.shape, dtype=bool)

    def build(t):
        total, _ = objective(ad.Tensor(batch), t, sentinel)
        return total

    check_gradients(build, [batch + 0.05])
