import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtd.baselines import (
    GFormulaModel,
    factual_rnn_fit,
    factual_rnn_predict,
    factual_rnn_predict_ite,
    factual_rnn_predict_ite_all,
    gformula_features,
    gformula_fit,
    gformula_objective,
    gformula_predict,
    gformula_predict_ite,
    gformula_predict_ite_all,
    init_factual_rnn,
)
from vtd.data import LongitudinalDataset, split
from vtd.model import ModelConfig, zeros_like_params
from vtd.params import named_arrays
from vtd.simulator import SimConfig, simulate


def _random_panel(n=80, t=6, p=3, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, t, p)), rng.integers(0, 2, size=(n, t))


def _linear_outcome(x, a, coef_x, coef_a, intercept, window):
    """y_t from the generating rule on the zero-padded window (x lags 0.., a lags 0..k-1)."""
    n, t_max, p = x.shape
    y = np.full((n, t_max), intercept)
    for t in range(t_max):
        for lag in range(window):
            if t - lag >= 0:
                y[:, t] += x[:, t - lag] @ coef_x[lag] + a[:, t - lag] * coef_a[lag]
    return y


def test_noiseless_linear_rule_recovered():
    window = 3
    x, a = _random_panel(seed=1)
    rng = np.random.default_rng(2)
    coef_x = rng.normal(size=(window, 3))
    coef_a = np.array([1.7, -0.4, 0.25])  # lags 0, 1, 2
    y = _linear_outcome(x, a, coef_x, coef_a, 0.3, window)
    model = gformula_fit(LongitudinalDataset(x=x, a=a, y=y), window, ridge=1e-8)
    # Column layout: x lags 0..k-1, a lags 1..k-1, a_t last.
    expected = np.concatenate([coef_x.ravel(), coef_a[1:], coef_a[:1]])
    np.testing.assert_allclose(model.coef, expected, rtol=0, atol=1e-6)
    assert abs(model.intercept - 0.3) <= 1e-6
    assert abs(model.treatment_coef - 1.7) <= 1e-6


def test_constant_outcome():
    x, a = _random_panel(seed=3)
    model = gformula_fit(LongitudinalDataset(x=x, a=a, y=np.full(a.shape, 2.5)), 3, ridge=1.0)
    np.testing.assert_allclose(model.coef, 0.0, atol=1e-12)
    assert abs(model.intercept - 2.5) <= 1e-12


def test_fit_is_deterministic():
    ds = simulate(SimConfig.desk(n_patients=100, seed=1))
    m1, m2 = gformula_fit(ds), gformula_fit(ds)
    assert np.array_equal(m1.coef, m2.coef) and m1.intercept == m2.intercept


def test_singular_system_needs_ridge():
    x, a = _random_panel(seed=4)
    x[..., 1] = x[..., 0]  # duplicated covariate
    with pytest.raises(np.linalg.LinAlgError, match="positive ridge"):
        gformula_fit(LongitudinalDataset(x=x, a=a, y=np.zeros(a.shape)), 2, ridge=0.0)


def test_too_few_windows():
    x, a = _random_panel(n=2, t=3)
    with pytest.raises(ValueError):
        gformula_fit(LongitudinalDataset(x=x, a=a, y=np.zeros(a.shape)), 3)
    with pytest.raises(ValueError):
        gformula_fit(LongitudinalDataset(x=x, a=a, y=np.zeros(a.shape)), 0)


def test_ite_equals_treatment_coefficient():
    x, a = _random_panel(seed=5)
    ds = LongitudinalDataset(x=x, a=a, y=np.zeros(a.shape))
    k, p = 3, 3
    coef = np.zeros(k * p + k)
    coef[-1] = 0.8
    model = GFormulaModel(k, coef, 0.1, 1.0)
    tau = gformula_predict_ite_all(model, ds)
    np.testing.assert_allclose(tau, 0.8, atol=1e-15)
    assert abs(gformula_predict_ite(model, ds, 4, 2) - 0.8) <= 1e-15
    zero = GFormulaModel(k, np.zeros(k * p + k), 0.0, 1.0)
    assert gformula_predict_ite(zero, ds, 0, 5) == 0.0


def test_ite_antisymmetric_and_ignores_factual_treatment():
    ds = simulate(SimConfig.desk(n_patients=60, seed=2))
    model = gformula_fit(ds)
    up = gformula_predict(model, ds, 1.0) - gformula_predict(model, ds, 0.0)
    down = gformula_predict(model, ds, 0.0) - gformula_predict(model, ds, 1.0)
    np.testing.assert_array_equal(up, -down)
    flipped = LongitudinalDataset(x=ds.x, a=ds.a.copy(), y=ds.y)
    flipped.a[:, 5] = 1 - flipped.a[:, 5]
    assert gformula_predict_ite(model, ds, 3, 5) == gformula_predict_ite(model, flipped, 3, 5)


def test_ite_requires_complete_window():
    ds = simulate(SimConfig.desk(n_patients=30, seed=2))
    model = gformula_fit(ds)
    with pytest.raises(ValueError):
        gformula_predict_ite(model, ds, 0, 1)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([-1e-3, 1e-3]))
def test_fit_minimizes_ridge_objective(seed, delta):
    ds = simulate(SimConfig.desk(n_patients=60, n_covariates=5, n_confounders=2, seed=seed % 50))
    model = gformula_fit(ds, 3, ridge=0.5)
    base = gformula_objective(model, ds)
    rng = np.random.default_rng(seed)
    for j in rng.choice(model.coef.size, size=4, replace=False):
        coef = model.coef.copy()
        coef[j] += delta
        assert gformula_objective(model, ds, coef=coef) >= base
    assert gformula_objective(model, ds, intercept=model.intercept + delta) >= base


def test_feature_layout():
    x, a = _random_panel(n=2, t=4, p=2, seed=6)
    feats = gformula_features(LongitudinalDataset(x=x, a=a, y=np.zeros(a.shape)), 2)
    assert feats.shape == (2, 4, 2 * 2 + 2)
    np.testing.assert_array_equal(feats[:, 2, :2], x[:, 2])
    np.testing.assert_array_equal(feats[:, 2, 2:4], x[:, 1])
    np.testing.assert_array_equal(feats[:, 2, 4], a[:, 1])
    np.testing.assert_array_equal(feats[:, 2, 5], a[:, 2])


# -- factual RNN -----------------------------------------------------------------


@pytest.fixture(scope="module")
def small_split():
    ds = simulate(SimConfig.desk(n_patients=120, n_covariates=5, n_confounders=2, seed=3))
    return split(ds, (0.6, 0.2, 0.2), 3)


def _cfg(**kw):
    return ModelConfig(p=5, r=2, hidden_size=8, max_epochs=3, batch_size=32, **kw)


def test_zero_params_predict_zero_effect(small_split):
    params = zeros_like_params(init_factual_rnn(_cfg(), np.random.default_rng(0)))
    np.testing.assert_array_equal(factual_rnn_predict_ite_all(params, small_split[2]), 0.0)


def test_factual_rnn_deterministic(small_split):
    tr, va, _ = small_split
    p1, _ = factual_rnn_fit(tr, va, _cfg(), 5)
    p2, _ = factual_rnn_fit(tr, va, _cfg(), 5)
    a1, a2 = named_arrays(p1), named_arrays(p2)
    assert all(np.array_equal(a1[k], a2[k]) for k in a1)


def test_factual_rnn_ite_consistency(small_split):
    tr, va, te = small_split
    params, _ = factual_rnn_fit(tr, va, _cfg(), 1)
    pred = factual_rnn_predict(params, te)
    np.testing.assert_allclose(pred["factual"], np.where(te.a == 1, pred["y1"], pred["y0"]), atol=1e-12)
    tau = factual_rnn_predict_ite_all(params, te)
    assert abs(factual_rnn_predict_ite(params, te, 2, 4) - tau[2, 4]) <= 1e-12
    flipped = te.subset(range(len(te)))
    flipped.a[2, 4] = 1 - flipped.a[2, 4]
    assert factual_rnn_predict_ite(params, te, 2, 4) == factual_rnn_predict_ite(params, flipped, 2, 4)
