import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vtd.data import LongitudinalDataset, split
from vtd.simulator import (
    CalibrationError,
    SimConfig,
    confounding_gap,
    simulate,
    standardized_summary,
    treatment_probability,
)

FIELDS = ("x", "a", "y", "mask", "z_true", "y_both_arms", "tau_true", "propensity_true")


def _small(**kw):
    base = dict(n_patients=200, n_covariates=8, n_confounders=3)
    base.update(kw)
    return SimConfig.desk(**base)


def test_default_dimensions():
    cfg = SimConfig()
    assert (cfg.n_patients, cfg.n_steps, cfg.n_covariates, cfg.n_confounders) == (4000, 10, 100, 5)


def test_simulated_shapes():
    ds = simulate(_small(seed=1))
    assert ds.x.shape == (200, 10, 8)
    assert ds.z_true.shape == (200, 10, 3)
    assert ds.y_both_arms.shape == (200, 10, 2)
    assert ds.has_counterfactuals and ds.n_confounders == 3


def test_bitwise_determinism():
    a, b = simulate(_small(seed=5)), simulate(_small(seed=5))
    for name in FIELDS:
        assert np.array_equal(getattr(a, name), getattr(b, name)), name
    assert a.meta == b.meta
    c = simulate(_small(seed=6))
    assert not np.array_equal(a.x, c.x)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from([0.0, 0.3, 0.6, 1.0]))
def test_factual_consistency_exact(seed, gamma):
    ds = simulate(_small(seed=seed, gamma=gamma, n_patients=100))
    picked = np.where(ds.a == 1, ds.y_both_arms[..., 1], ds.y_both_arms[..., 0])
    assert np.array_equal(ds.y, picked)
    assert np.array_equal(ds.tau_true, ds.y_both_arms[..., 1] - ds.y_both_arms[..., 0])


def test_true_effect_is_linear_in_confounders():
    ds = simulate(_small(seed=2))
    beta = np.asarray(ds.meta["beta"])
    np.testing.assert_allclose(ds.tau_true, 1.0 + ds.z_true @ beta, atol=1e-12)


@pytest.mark.parametrize("gamma", [0.0, 0.3, 0.6, 1.0])
def test_positivity_and_treated_fraction(gamma):
    ds = simulate(SimConfig.desk(gamma=gamma, seed=3))
    assert ds.propensity_true.min() >= 0.01
    assert ds.propensity_true.max() <= 0.99
    assert 0.45 <= ds.treated_fraction() <= 0.55


def test_effect_heterogeneity():
    ds = simulate(_small(seed=4))
    assert ds.tau_true.var() > 0
    flat = simulate(_small(seed=4, beta=(0.0, 0.0, 0.0)))
    np.testing.assert_allclose(flat.tau_true, 1.0, rtol=0, atol=1e-12)


def test_gamma_zero_ignores_confounder_summary():
    rng = np.random.default_rng(0)
    x_s = rng.normal(size=50)
    p1 = treatment_probability(rng.normal(size=50), x_s, 0.0, 1.5, 0.2)
    p2 = treatment_probability(rng.normal(size=50) * 10, x_s, 0.0, 1.5, 0.2)
    assert np.array_equal(p1, p2)
    p3 = treatment_probability(rng.normal(size=50), x_s, 0.6, 1.5, 0.2)
    assert not np.array_equal(p1, p3)


def test_treatment_probability_clipped():
    p = treatment_probability(np.array([-100.0, 0.0, 100.0]), np.zeros(3), 1.0, 1.5, 0.0)
    np.testing.assert_array_equal(p, [0.01, 0.5, 0.99])


def test_standardized_summary():
    v = np.array([[1.0, 10.0], [3.0, 30.0]])
    np.testing.assert_allclose(standardized_summary(v), [-1.0, 1.0])
    np.testing.assert_array_equal(standardized_summary(np.ones((4, 3))), 0.0)


def test_confounding_gap_monotone_in_gamma():
    gaps = [np.mean([confounding_gap(simulate(SimConfig.desk(gamma=g, seed=s))) for s in range(10)])
            for g in (0.0, 0.3, 0.6)]
    assert gaps[0] <= gaps[1] <= gaps[2]


def test_config_validation():
    with pytest.raises(ValueError):
        SimConfig(gamma=1.5)
    with pytest.raises(ValueError):
        SimConfig(sigma_x=0.0)
    with pytest.raises(ValueError):
        SimConfig(n_patients=0)
    with pytest.raises(ValueError):
        SimConfig(n_confounders=2, beta=(1.0,))


def test_calibration_failure_reported():
    # A single patient-step cannot land in the treated-fraction band.
    with pytest.raises(CalibrationError):
        simulate(SimConfig(n_patients=1, n_steps=1, n_covariates=2, n_confounders=1))


# -- splitting -------------------------------------------------------------------


def _toy(n=10):
    return LongitudinalDataset(x=np.zeros((n, 2, 1)), a=np.zeros((n, 2)), y=np.arange(2 * n).reshape(n, 2))


def test_split_sizes():
    parts = split(_toy(10), (0.6, 0.2, 0.2), seed=0)
    assert [len(p) for p in parts] == [6, 2, 2]


@settings(max_examples=50, deadline=None)
@given(st.integers(5, 60), st.integers(0, 1000))
def test_split_is_partition(n, seed):
    parts = split(_toy(n), (0.6, 0.2, 0.2), seed=seed)
    ids = [i for p in parts for i in p.ids]
    assert sorted(ids, key=int) == [str(i) for i in range(n)]
    assert len(set(ids)) == n


def test_split_deterministic():
    a = split(_toy(30), seed=9)
    b = split(_toy(30), seed=9)
    assert [p.ids for p in a] == [p.ids for p in b]


def test_split_rejects_bad_fractions():
    with pytest.raises(ValueError):
        split(_toy(10), (0.5, 0.4))
    with pytest.raises(ValueError):
        split(_toy(2), (0.6, 0.2, 0.2))


def test_dataset_validation():
    with pytest.raises(ValueError):
        LongitudinalDataset(x=np.zeros((2, 3, 1)), a=np.full((2, 3), 2), y=np.zeros((2, 3)))
    with pytest.raises(ValueError):
        LongitudinalDataset(x=np.zeros((2, 3, 1)), a=np.zeros((2, 4)), y=np.zeros((2, 3)))
