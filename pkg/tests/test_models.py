import numpy as np
import pytest

from rescorr import autodiff as ad
from rescorr import models as md
from rescorr.dataset import Feature, FeatureSchema, fit_standardizer, EventTable, schema_from_names


def schema5():
    return FeatureSchema(
        (
            Feature("pt1", "momentum", alpha=0.5, zero_protected=True),
            Feature("eta1", "pseudorapidity", alpha=0.5),
            Feature("phi1", "azimuth", alpha=0.3),
            Feature("pt2", "momentum", alpha=1.0),
            Feature("met", "momentum", alpha=0.5, mask=0),
        )
    )


def rows_for(schema, n=64, seed=0):
    rng = np.random.default_rng(seed)
    rows = rng.standard_normal((n, schema.d))
    rows[::5, 0] = 0.0  # protected sentinels
    return rows


# --- init -----------------------------------------------------------------


def test_init_zero_biases():
    mlp = md.init_mlp((3, 8, 2), seed=0)
    for b in mlp.biases:
        assert np.all(b.values == 0.0)


def test_init_deterministic():
    a = md.init_mlp((4, 16, 4), seed=3)
    b = md.init_mlp((4, 16, 4), seed=3)
    for wa, wb in zip(a.weights, b.weights):
        assert np.array_equal(wa.values, wb.values)


def test_init_uniform_limit():
    mlp = md.init_mlp((10, 20, 5), seed=1)
    for k, w in enumerate(mlp.weights):
        fan_in, fan_out = mlp.sizes[k], mlp.sizes[k + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        assert np.max(np.abs(w.values)) <= limit


def test_init_zero_final():
    mlp = md.init_mlp((3, 8, 2), seed=0, zero_final=True)
    assert np.all(mlp.weights[-1].values == 0.0)
    assert np.any(mlp.weights[0].values != 0.0)


# --- global model ---------------------------------------------------------


def test_fresh_model_is_identity():
    schema = schema5()
    model = md.GlobalResidualModel.create(schema, hidden=(16,), seed=0)
    x = rows_for(schema)
    assert np.array_equal(model.transform(x), x)


def test_zero_weights_identity():
    schema = schema5()
    model = md.GlobalResidualModel.create(schema, hidden=(8,), seed=0)
    for p in model.parameters():
        p.values = np.zeros_like(p.values)
    x = rows_for(schema)
    assert np.array_equal(model.transform(x), x)


def randomized(model, seed=1, scale=1.0):
    rng = np.random.default_rng(seed)
    for p in model.parameters():
        p.values = rng.standard_normal(p.values.shape) * scale
    return model


def test_masked_feature_unchanged():
    schema = schema5()
    model = randomized(md.GlobalResidualModel.create(schema, hidden=(16,), seed=0))
    x = rows_for(schema)
    out = model.transform(x)
    assert np.array_equal(out[:, 4], x[:, 4])  # met has mask 0


def test_sentinel_fixed_point():
    schema = schema5()
    model = randomized(md.GlobalResidualModel.create(schema, hidden=(16,), seed=0))
    x = rows_for(schema)
    out = model.transform(x)
    sent = x[:, 0] == 0.0
    assert np.array_equal(out[sent, 0], x[sent, 0])


def test_boundedness():
    schema = schema5()
    model = randomized(md.GlobalResidualModel.create(schema, hidden=(32,), seed=0), scale=3.0)
    x = rows_for(schema, n=500)
    out = model.transform(x)
    alphas = schema.alphas()
    assert np.all(np.abs(out - x) <= alphas[None, :] + 1e-12)


def test_saturation_reaches_alpha():
    schema = schema5()
    model = randomized(md.GlobalResidualModel.create(schema, hidden=(8,), seed=2), scale=1e6)
    x = rows_for(schema, n=200)
    out = model.transform(x)
    moved = np.abs(out - x)
    # unmasked, non-sentinel entries saturate at exactly alpha
    assert abs(moved[1, 1] - 0.5) < 1e-9
    assert abs(moved[1, 3] - 1.0) < 1e-9


def test_forward_dimension_mismatch():
    schema = schema5()
    model = md.GlobalResidualModel.create(schema, hidden=(8,), seed=0)
    with pytest.raises(md.ModelError):
        model.forward(ad.Tensor(np.zeros((4, 3))))


# --- feature model --------------------------------------------------------


def test_feature_zero_net_identity():
    schema = schema5()
    model = md.FeatureResidualModel.create(schema, 1, (0, 1, 2), hidden=(8,), seed=0)
    x = rows_for(schema)
    out = model.forward(ad.Tensor(x)).values
    assert np.array_equal(out, x[:, 1])


def test_feature_sentinel_protected():
    schema = schema5()
    model = randomized(md.FeatureResidualModel.create(schema, 0, (0, 1), hidden=(8,), seed=0))
    x = rows_for(schema)
    out = model.forward(ad.Tensor(x)).values
    sent = x[:, 0] == 0.0
    assert np.array_equal(out[sent], x[sent, 0])
    assert not np.array_equal(out[~sent], x[~sent, 0])


def test_feature_depends_only_on_context():
    schema = schema5()
    model = randomized(md.FeatureResidualModel.create(schema, 1, (0, 1), hidden=(8,), seed=4))
    x = rows_for(schema)
    base = model.forward(ad.Tensor(x)).values
    perturbed = x.copy()
    perturbed[:, 3] += 10.0  # outside the context set
    assert np.array_equal(model.forward(ad.Tensor(perturbed)).values, base)
    perturbed2 = x.copy()
    perturbed2[:, 0] += 0.5  # inside the context set
    assert not np.array_equal(model.forward(ad.Tensor(perturbed2)).values, base)


def test_feature_invalid_context():
    schema = schema5()
    with pytest.raises(md.ModelError):
        md.FeatureResidualModel.create(schema, 1, (0, 99), hidden=(8,), seed=0)


# --- two-step -------------------------------------------------------------


def twostep(schema, seed=0):
    ctx = md.default_context_sets(schema)
    stage1 = [
        md.FeatureResidualModel.create(schema, j, ctx[j], hidden=(8,), seed=seed + j)
        for j in range(schema.d)
        if schema.features[j].mask
    ]
    stage2 = md.GlobalResidualModel.create(schema, hidden=(16,), seed=seed + 100)
    return md.TwoStepModel(schema, stage1, stage2)


def test_twostep_zero_weight_identity():
    schema = schema5()
    model = twostep(schema)
    x = rows_for(schema)
    x1, x2 = model.forward(ad.Tensor(x))
    assert np.array_equal(x1.values, x)
    assert np.array_equal(x2.values, x)


def test_twostep_stage2_zero_passthrough():
    schema = schema5()
    model = twostep(schema)
    for m in model.stage1.values():
        randomized(m, seed=m.feature + 1)
    x = rows_for(schema)
    x1, x2 = model.forward(ad.Tensor(x))
    assert np.array_equal(x2.values, x1.values)


def test_twostep_stage1_reads_original_input():
    schema = schema5()
    model = twostep(schema)
    for m in model.stage1.values():
        randomized(m, seed=m.feature + 1)
    x = rows_for(schema)
    x1, _ = model.forward(ad.Tensor(x))
    # each feature's correction computed independently from the original x
    for j, m in model.stage1.items():
        expected = m.forward(ad.Tensor(x)).values
        assert np.array_equal(x1.values[:, j], expected)


def test_twostep_cumulative_bound():
    schema = schema5()
    model = twostep(schema)
    for m in model.stage1.values():
        randomized(m, seed=m.feature + 1, scale=5.0)
    randomized(model.stage2, seed=50, scale=5.0)
    x = rows_for(schema, n=400)
    _, x2 = model.forward(ad.Tensor(x))
    bound = 2 * schema.alphas()
    assert np.all(np.abs(x2.values - x) <= bound[None, :] + 1e-12)


# --- persistence ----------------------------------------------------------


def test_save_load_roundtrip_global(tmp_path):
    schema = schema5()
    model = randomized(md.GlobalResidualModel.create(schema, hidden=(16,), seed=0))
    table = EventTable(schema, rows_for(schema))
    std = fit_standardizer(table)
    path = tmp_path / "model.json"
    md.save_model(model, path, std)
    loaded, std2 = md.load_model(path, expect_kind="global")
    x = rows_for(schema, seed=9)
    assert np.array_equal(loaded.transform(x), model.transform(x))
    assert np.array_equal(std2.mean, std.mean)
    assert np.array_equal(std2.scale, std.scale)


def test_save_load_roundtrip_twostep(tmp_path):
    schema = schema5()
    model = twostep(schema)
    for m in model.stage1.values():
        randomized(m, seed=m.feature + 7)
    randomized(model.stage2, seed=77)
    path = tmp_path / "ts.json"
    md.save_model(model, path)
    loaded, _ = md.load_model(path, expect_kind="twostep")
    x = rows_for(schema, seed=10)
    assert np.array_equal(loaded.transform(x), model.transform(x))


def test_load_corrupted_file(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text("{not json")
    with pytest.raises(md.ModelError):
        md.load_model(path)


def test_load_wrong_kind(tmp_path):
    schema = schema5()
    model = md.GlobalResidualModel.create(schema, hidden=(8,), seed=0)
    path = tmp_path / "g.json"
    md.save_model(model, path)
    with pytest.raises(md.ModelError, match="kind"):
        md.load_model(path, expect_kind="twostep")


def test_default_context_sets():
    from rescorr.observables import ObjectSpec

    schema = schema_from_names(["pt1", "eta1", "phi1", "pt2", "eta2", "phi2", "met"])
    objs = [ObjectSpec("o1", 0, 1, 2), ObjectSpec("o2", 3, 4, 5)]
    ctx = md.default_context_sets(schema, objs)
    assert ctx[0] == (0, 1, 2)
    assert ctx[4] == (3, 4, 5)
    assert ctx[6] == (6,)
