import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from hetfx.baselines import (
    aipw_estimate,
    aipw_pseudo_outcome,
    fit_outcome_models,
    ipw_estimate,
    ipw_pseudo_outcome,
    match_pairs,
    match_variant_estimate,
)
from hetfx.data import EvaluationGrid, ObservationalDataset
from hetfx.errors import InvalidArgumentError
from hetfx.simbench import ScenarioConfig, generate_dataset, scenario_grid, true_tau


def test_ipw_pseudo_outcome_value():
    assert ipw_pseudo_outcome([1.0], [4.0], [0.5])[0] == 8.0
    assert ipw_pseudo_outcome([0.0], [4.0], [0.5])[0] == -8.0


@given(
    e=st.floats(1e-6, 1 - 1e-6),
    y=st.floats(-1e3, 1e3),
    d=st.sampled_from([0.0, 1.0]),
    m1=st.floats(-10, 10),
    m0=st.floats(-10, 10),
)
def test_pseudo_outcomes_finite_and_bounded(e, y, d, m1, m0):
    z = ipw_pseudo_outcome([d], [y], [e])[0]
    assert np.isfinite(z) and abs(z) <= abs(y) * max(1 / e, 1 / (1 - e)) * (1 + 1e-12)
    a = aipw_pseudo_outcome([d], [y], [e], m1, m0)[0]
    assert np.isfinite(a)
    assert abs(a) <= (abs(y) + 10) * max(1 / e, 1 / (1 - e)) + 20 + 1e-6


def test_aipw_residual_term_vanishes():
    assert aipw_pseudo_outcome([1.0], [2.5], [0.3], 2.5, 1.0)[0] == pytest.approx(1.5)


def test_ipw_constant_effect_large_n():
    rng = np.random.default_rng(0)
    n = 10000
    x = rng.uniform(-0.5, 0.5, (n, 2))
    e = 1 / (1 + np.exp(-(x[:, 0] - x[:, 1])))
    d = (rng.uniform(size=n) < e).astype(float)
    y = 2 * d + x[:, 1] + rng.normal(size=n)
    ds = ObservationalDataset(x=x, xl_index=0, d=d, y=y)
    grid = EvaluationGrid(np.linspace(-0.3, 0.3, 5))
    est = ipw_estimate(ds, e, 0.1, grid)
    assert np.max(np.abs(est.tau_hat - 2)) < 0.25
    assert np.all(est.variance > 0) and np.all(est.ci_lo < est.ci_hi)


def test_aipw_double_robust_sim_iii():
    # true scores make AIPW unbiased even with misspecified linear arm models
    grid = scenario_grid(25)
    bias = []
    for r in range(10):
        sim = generate_dataset(ScenarioConfig("III", "D", 8000, 5, seed=40 + r))
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            est = aipw_estimate(sim.dataset, sim.true_scores, 0.1, grid)
        bias.append(np.mean(est.tau_hat - true_tau("III", grid.points)))
    assert est.method == "aipw"
    assert abs(np.mean(bias)) < 0.01


def test_outcome_models_need_enough_units():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(20, 5))
    d = np.zeros(20)
    d[:4] = 1
    ds = ObservationalDataset(x=x, xl_index=0, d=d, y=rng.normal(size=20))
    with pytest.raises(InvalidArgumentError):
        fit_outcome_models(ds)


def test_outcome_models_rank_deficient_flagged():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(60, 3))
    x[:, 2] = x[:, 0] + x[:, 1]
    d = (np.arange(60) % 2).astype(float)
    om = fit_outcome_models(ObservationalDataset(x=x, xl_index=0, d=d, y=x[:, 0]))
    assert om.regularized
    assert np.allclose(om.mu1, x[:, 0], atol=1e-5)


def _pairs_data(seed=0, n=60):
    rng = np.random.default_rng(seed)
    xl = rng.uniform(-1, 1, n)
    e = rng.uniform(0.1, 0.9, n)
    d = (rng.uniform(size=n) < 0.5).astype(float)
    d[:2] = (0, 1)
    y = rng.normal(size=n)
    return xl, e, d, y


def test_match_pairs_invariants():
    xl, e, d, y = _pairs_data()
    mp = match_pairs(xl, e, d, y)
    assert np.array_equal(mp.pairs[:, 0], np.arange(len(d)))
    assert np.all(d[mp.pairs[:, 1]] != d)
    assert np.array_equal(mp.imputed_y1[d == 1], y[d == 1])
    assert np.array_equal(mp.imputed_y0[d == 0], y[d == 0])


def test_match_pairs_mahalanobis_oracle():
    xl, e, d, y = _pairs_data(1)
    z = np.column_stack((xl, e))
    S = np.linalg.inv(np.cov(z, rowvar=False))
    mp = match_pairs(xl, e, d, y)
    for i in range(len(d)):
        cand = np.flatnonzero(d != d[i])
        diff = z[cand] - z[i]
        dist = np.einsum("ij,jk,ik->i", diff, S, diff)
        assert mp.pairs[i, 1] == cand[np.argmin(dist)]


def test_match_identity_covariance_is_euclidean():
    # (X^l, e) with identity sample covariance
    z = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]) * np.sqrt(1.5)
    z += 0.5
    assert np.allclose(np.cov(z, rowvar=False), np.eye(2))
    d = np.array([1.0, 0.0, 0.0, 1.0])
    mp = match_pairs(z[:, 0], z[:, 1], d, np.arange(4.0))
    # Euclidean distances: unit 0 -> {1: 2a, 2: a*sqrt(2)}, unit 3 -> {1: a*sqrt(2), 2: 2a}
    assert mp.pairs[0, 1] == 2 and mp.pairs[3, 1] == 1
    assert not mp.euclidean_fallback


def test_match_ties_lowest_index_and_fallback():
    xl = np.array([0.0, 1.0, 1.0, 1.0])
    e = np.array([0.5, 0.5, 0.5, 0.5])
    d = np.array([1.0, 0.0, 0.0, 0.0])
    mp = match_pairs(xl, e, d, np.zeros(4))
    assert mp.euclidean_fallback
    assert mp.pairs[0, 1] == 1


def test_exact_match_clone_data():
    rng = np.random.default_rng(4)
    n = 100
    xl = rng.uniform(-0.5, 0.5, n)
    e = rng.uniform(0.2, 0.8, n)
    X = np.concatenate((xl, xl))
    E = np.concatenate((e, e))
    D = np.concatenate((np.ones(n), np.zeros(n)))
    ds = ObservationalDataset(x=X[:, None], xl_index=0, d=D, y=3 * D)
    est = match_variant_estimate(ds, E, 0.1, EvaluationGrid(np.array([-0.2, 0.0, 0.2])), seed=1, bootstrap_b=20)
    assert np.allclose(est.tau_hat, 3, atol=1e-10)
    assert est.method == "match_psr"


def test_match_variant_deterministic_and_band():
    sim = generate_dataset(ScenarioConfig("III", "D", 800, 5, seed=5))
    grid = scenario_grid(9)
    kw = dict(h3=0.15, grid=grid, seed=3, bootstrap_b=30)
    a = match_variant_estimate(sim.dataset, sim.true_scores, **kw)
    b = match_variant_estimate(sim.dataset, sim.true_scores, **kw)
    c = match_variant_estimate(sim.dataset, sim.true_scores, **{**kw, "seed": 4})
    assert np.array_equal(a.ci_lo, b.ci_lo) and np.array_equal(a.ci_hi, b.ci_hi)
    assert not np.array_equal(a.ci_lo, c.ci_lo)
    assert np.all(a.ci_lo <= a.ci_hi)
    assert np.all(a.variance > 0)


def test_baselines_permutation_invariant():
    sim = generate_dataset(ScenarioConfig("I", "C", 500, 5, seed=6))
    ds, e = sim.dataset, sim.true_scores
    perm = np.random.default_rng(0).permutation(ds.n)
    grid = scenario_grid(7)
    for fn in (ipw_estimate, aipw_estimate):
        a = fn(ds, e, 0.15, grid).tau_hat
        b = fn(ds.take(perm), e[perm], 0.15, grid).tau_hat
        assert np.max(np.abs(a - b)) < 1e-10
    a = match_variant_estimate(ds, e, 0.15, grid, bootstrap_b=0).tau_hat
    b = match_variant_estimate(ds.take(perm), e[perm], 0.15, grid, bootstrap_b=0).tau_hat
    assert np.max(np.abs(a - b)) < 1e-10
