import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize, stats

from helpers import tiny_gan_cfg, tiny_vae_cfg
from semapop.counterfactual import (
    DEFAULT_ALPHAS,
    InterventionDirection,
    build_subgroups,
    draw_fixed_noise,
    edit_embedding,
    fit_direction,
    generate_with_noise,
    percentiles,
    semantic_sweep,
    side_effects,
    spearman,
    standardize_embeddings,
    text_sweep,
)
from semapop.embeddings import mock_embed
from semapop.gan import train
from semapop.population import Population
from semapop.toy import planted_embeddings
from semapop.vae import train_vae


def test_default_grid():
    assert DEFAULT_ALPHAS == (-1.5, -1.0, -0.5, 0.0, 0.5, 1.0, 1.5)


def test_standardizer():
    rng = np.random.default_rng(0)
    E = rng.normal(3, 2, (200, 5))
    E[:, 2] = 7.0
    st_, Z = standardize_embeddings(E)
    np.testing.assert_allclose(Z[:, [0, 1, 3, 4]].mean(0), 0, atol=1e-6)
    np.testing.assert_allclose(Z[:, [0, 1, 3, 4]].std(0), 1, atol=1e-6)
    assert np.all(Z[:, 2] == 0)
    held_out = st_.transform(E[:10] + 5.0)
    assert np.all(held_out[:, 0].mean() > 1)
    np.testing.assert_allclose(st_.inverse(st_.transform(E)), E, atol=1e-12)
    with pytest.raises(ValueError):
        standardize_embeddings(E[:1])


def _clusters(n=2000, dim=16, seed=0):
    y = (np.arange(n) % 2).astype(float)
    # unit spread per axis, separation 5
    emb, u = planted_embeddings(y, dim, 5.0, seed)
    return emb.matrix.astype(np.float64), y, u


def test_probe_recovers_planted_axis_and_flips():
    E, y, u = _clusters()
    d = fit_direction(E, y)
    assert abs(np.linalg.norm(d.d) - 1) < 1e-9
    assert abs(d.d @ u) >= 0.95
    flipped = fit_direction(E, 1 - y)
    assert d.d @ flipped.d <= -0.999


def test_probe_matches_generic_optimizer():
    E, y, _ = _clusters(n=400, dim=6, seed=3)
    lam = 1.0

    def f(t):
        m = E @ t[:-1] + t[-1]
        return np.sum(np.logaddexp(0, m) - y * m) + lam * t[:-1] @ t[:-1]

    ref = optimize.minimize(f, np.zeros(7), method="BFGS", options={"gtol": 1e-9}).x
    d = fit_direction(E, y, lam=lam)
    np.testing.assert_allclose(d.d, ref[:-1] / np.linalg.norm(ref[:-1]), atol=1e-5)
    assert d.intercept == pytest.approx(ref[-1], abs=1e-4)


def test_probe_errors():
    E = np.random.default_rng(0).normal(size=(10, 3))
    with pytest.raises(ValueError, match="both classes"):
        fit_direction(E, np.ones(10))
    with pytest.raises(ValueError, match="binary"):
        fit_direction(E, np.arange(10))
    with pytest.raises(ValueError):
        fit_direction(E, np.arange(10) % 2, lam=0)
    with pytest.raises(ValueError, match="unit norm"):
        InterventionDirection(np.array([1.0, 1.0]))


def test_edit_embedding_cases():
    d = InterventionDirection(np.array([0.6, 0.8]))
    e0 = np.array([[1.0, 2.0]])
    assert np.array_equal(edit_embedding(e0, d, 0.0), e0)
    assert np.linalg.norm(edit_embedding(np.zeros(2), d, 1.5)) == pytest.approx(1.5, abs=1e-15)
    with pytest.raises(ValueError):
        edit_embedding(np.zeros(3), d, 1.0)


@settings(max_examples=50, deadline=None)
@given(a=st.floats(-3, 3), b=st.floats(-3, 3), seed=st.integers(0, 1000))
def test_edit_is_additive(a, b, seed):
    rng = np.random.default_rng(seed)
    v = rng.normal(size=4)
    d = InterventionDirection(v / np.linalg.norm(v))
    e0 = rng.normal(size=(3, 4))
    np.testing.assert_allclose(edit_embedding(edit_embedding(e0, d, a), d, b), edit_embedding(e0, d, a + b), atol=1e-12)


def test_side_effects(toy_pop):
    base = toy_pop.take(np.arange(100))
    assert side_effects(base, base, "PT_Trips") == {"Cars": 0.0}
    shifted = Population(base.frame.assign(Cars=base.frame["Cars"] + 2), base.schema)
    assert side_effects(base, shifted, "PT_Trips") == {"Cars": 2.0}
    assert "PT_Trips" not in side_effects(base, shifted, "PT_Trips")
    other = toy_pop.take(np.arange(100, 200))
    assert side_effects(base, other, "Cars") == side_effects(other, base, "Cars")
    with pytest.raises(ValueError):
        side_effects(base, other.take(np.arange(5)), "Cars")


def _pt_pop(toy_pop, values):
    n = len(values)
    frame = toy_pop.frame.iloc[:n].reset_index(drop=True).assign(PT_Trips=values)
    return Population(frame, toy_pop.schema)


def test_subgroups_sizes_and_disjoint(toy_pop):
    pop = _pt_pop(toy_pop, np.ones(100, dtype=int))
    high, low = build_subgroups(pop, "PT_Trips", seed=0)
    assert len(high) == 10
    assert len(low) == 5
    values = np.r_[np.zeros(60, dtype=int), np.arange(1, 41) % 5 + 1]
    pop = _pt_pop(toy_pop, values)
    high, low = build_subgroups(pop, "PT_Trips", seed=1)
    assert len(high) == 4 and len(low) == 2 + 3
    assert set(high).isdisjoint(low)
    assert values[high].min() == values.max()
    h2, l2 = build_subgroups(pop, "PT_Trips", seed=1)
    assert np.array_equal(high, h2) and np.array_equal(low, l2)
    with pytest.raises(ValueError):
        build_subgroups(_pt_pop(toy_pop, np.zeros(10, dtype=int)), "PT_Trips", 0)


@settings(max_examples=30, deadline=None)
@given(values=st.lists(st.integers(0, 6), min_size=5, max_size=200), seed=st.integers(0, 100))
def test_subgroup_properties(values, seed, toy_pop):
    values = np.asarray(values)
    if not np.any(values > 0):
        return
    pop = _pt_pop(toy_pop, values)
    high, low = build_subgroups(pop, "PT_Trips", seed)
    n_pos = int(np.sum(values > 0))
    assert len(high) == int(np.floor(0.1 * n_pos + 0.5))
    assert set(high).isdisjoint(low)
    if len(high):
        rest = np.setdiff1d(np.flatnonzero(values > 0), high)
        assert rest.size == 0 or values[high].min() >= values[rest].max()


def test_percentile_rule():
    assert percentiles([-3, -2, -2, -1, 0]) == (-2.0, -2.5, -0.5)
    assert percentiles([0, 0, 0]) == (0.0, 0.0, 0.0)


def test_spearman_matches_scipy():
    rng = np.random.default_rng(0)
    x = rng.normal(size=30)
    y = np.round(x + rng.normal(size=30), 1)
    assert spearman(x, y) == pytest.approx(stats.spearmanr(x, y).statistic, abs=1e-12)
    assert spearman(DEFAULT_ALPHAS, [1, 1, 1, 1, 1, 1, 1]) == 0.0


@pytest.fixture(scope="module")
def tiny_models(toy_pop, toy_embeddings):
    gan = train(toy_pop, toy_embeddings, cfg=tiny_gan_cfg(steps=2))
    vae = train_vae(toy_pop, toy_embeddings, cfg=tiny_vae_cfg(epochs=1))
    return {"gan": gan, "vae": vae}


@pytest.mark.parametrize("backbone", ["gan", "vae"])
def test_sweep_zero_alpha_reproduces_baseline(backbone, tiny_models, toy_embeddings):
    model = tiny_models[backbone]
    E0 = toy_embeddings.take(np.arange(300))
    st_, Z = standardize_embeddings(toy_embeddings)
    d = fit_direction(Z, (np.arange(toy_embeddings.n) % 3 == 0).astype(float))
    rep = semantic_sweep(model, E0, d, DEFAULT_ALPHAS, "PT_Trips", seed=4, standardizer=st_)
    assert [r["alpha"] for r in rep.semantic] == list(DEFAULT_ALPHAS)
    assert list(rep.semantic[0]) == ["alpha", "mean_target", "activation", "Cars"]
    baseline = generate_with_noise(model, E0, draw_fixed_noise(model, 300, 4), 4)
    zero = next(r for r in rep.semantic if r["alpha"] == 0.0)
    t = baseline.frame["PT_Trips"].to_numpy(dtype=float)
    assert zero["mean_target"] == t.mean() and zero["activation"] == np.mean(t > 0)
    assert zero["Cars"] == 0.0
    assert all(0 <= r["activation"] <= 1 for r in rep.semantic)


def test_sweep_validation(tiny_models, toy_embeddings):
    d = InterventionDirection(np.eye(toy_embeddings.dim)[0])
    with pytest.raises(ValueError):
        semantic_sweep(tiny_models["gan"], toy_embeddings.take([0, 1]), d, [], "PT_Trips")
    with pytest.raises(ValueError):
        semantic_sweep(tiny_models["gan"], toy_embeddings.take([0, 1]), d, [0.0], "Region")


def test_text_sweep_identical_texts_zero(tiny_models, tmp_path):
    texts = [f"region=Urban cars=low pt_trips=moderate id={i % 7}" for i in range(40)]
    embed = lambda t: mock_embed(t, 32, 0)
    rep = text_sweep(tiny_models["gan"], texts, {"removal": texts}, embed, seed=2, target_attr="PT_Trips")
    row = rep.text[0]
    assert row["variant"] == "removal"
    assert all(row[k] == 0.0 for k in ("d_mean", "d_activation", "d_median", "d_p25", "d_p75"))
    rep.write_text_csv(tmp_path / "t.csv")
    assert pd.read_csv(tmp_path / "t.csv").columns.tolist() == ["variant", "d_mean", "d_activation", "d_median", "d_p25", "d_p75"]
    with pytest.raises(ValueError):
        text_sweep(tiny_models["gan"], texts, {"removal": texts[:3]}, embed, 2, "PT_Trips")
