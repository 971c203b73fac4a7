
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hetfx.errors import ConfigurationError, InvalidArgumentError, SeparationWarning, SingularDesignError
from hetfx.propensity import Link, PropensityFit, fit_glm, predict_scores, resolve_scores
from hetfx.simbench import ScenarioConfig, generate_dataset


def test_logit_recovers_mechanism_a():
    sim = generate_dataset(ScenarioConfig("I", "A", 20_000, 5, seed=3))
    fit = fit_glm(sim.dataset, "logit")
    assert fit.converged
    X = np.column_stack((np.ones(20_000), sim.dataset.x))
    mu = 1 / (1 + np.exp(-(X @ fit.alpha_hat)))
    se = np.sqrt(np.diag(np.linalg.inv(X.T @ (X * (mu * (1 - mu))[:, None]))))
    truth = np.array([0.0, 1, -1, -1, 1, -1])
    assert np.all(np.abs(fit.alpha_hat - truth) < 3 * se)


def test_loglik_nondecreasing():
    sim = generate_dataset(ScenarioConfig("III", "B", 3000, 5, seed=1))
    for link in ("logit", "probit"):
        trace = np.array(fit_glm(sim.dataset, link).loglik_trace)
        assert np.all(np.diff(trace) >= -1e-12 * np.abs(trace[1:]))


def test_zero_covariates_half_treated():
    n = 200
    d = np.repeat([0.0, 1.0], n // 2)
    # no covariate information: intercept-only model
    fit = fit_glm((np.zeros((n, 0)), d), "logit")
    assert fit.alpha_hat.shape == (1,) and abs(fit.alpha_hat[0]) < 1e-10
    # a covariate balanced across arms: slope is zero as well
    x = np.tile([-1.0, 1.0], n // 2)[:, None]
    fit = fit_glm((x, d), "probit")
    assert np.allclose(fit.alpha_hat, 0, atol=1e-10)
    # literal all-zero columns make the design rank deficient
    with pytest.raises(SingularDesignError):
        fit_glm((np.zeros((n, 2)), d))


def test_constant_treatment_rejected():
    with pytest.raises(InvalidArgumentError):
        fit_glm((np.random.default_rng(0).normal(size=(20, 2)), np.ones(20)))


def test_rank_deficient_design():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(50, 2))
    x = np.column_stack((x, x[:, 0] + x[:, 1]))
    d = (rng.uniform(size=50) < 0.5).astype(float)
    with pytest.raises(SingularDesignError):
        fit_glm((x, d))


def test_too_few_rows():
    with pytest.raises(SingularDesignError):
        fit_glm((np.arange(6.0).reshape(3, 2), np.array([0.0, 1.0, 0.0])))


def test_separation_flagged():
    x = np.linspace(-1, 1, 40)[:, None]
    d = (x[:, 0] > 0).astype(float)
    with pytest.warns(SeparationWarning):
        fit = fit_glm((x, d), "logit")
    assert fit.separation
    assert np.all(np.isfinite(fit.alpha_hat))


def _fit(alpha, link="logit"):
    return PropensityFit(alpha_hat=np.asarray(alpha, dtype=float), link=Link(link), converged=True, iterations=1)


def test_predict_scores_values():
    assert predict_scores(_fit([0.0, 1.0]), [[0.0]])[0] == 0.5
    assert predict_scores(_fit([0.0, 1.0], "probit"), [[0.0]])[0] == 0.5
    assert predict_scores(_fit([0.0, 1.0]), [[2.0]])[0] == pytest.approx(1 / (1 + np.exp(-2)), abs=1e-12)
    assert predict_scores(_fit([0.0, 1.0]), [[2.0]])[0] == pytest.approx(0.880797, abs=1e-6)
    assert predict_scores(_fit([0.0, 1.0]), [[100.0]])[0] == 1 - 1e-6
    with pytest.raises(InvalidArgumentError):
        predict_scores(_fit([0.0, 1.0]), [[1.0, 2.0]])


@pytest.mark.parametrize("link", ["logit", "probit"])
@given(eta=st.lists(st.floats(-30, 30), min_size=2, max_size=20))
def test_predict_monotone(link, eta):
    eta = np.sort(np.array(eta))
    s = predict_scores(_fit([0.0, 1.0], link), eta[:, None])
    assert np.all(np.diff(s) >= 0)
    assert np.all((s > 0) & (s < 1))


@settings(max_examples=15, deadline=None)
@given(c=st.floats(0.01, 100), col=st.integers(0, 4))
def test_logit_scores_invariant_to_rescaling(c, col):
    sim = generate_dataset(ScenarioConfig("I", "C", 800, 5, seed=9))
    x = sim.dataset.x.copy()
    d = sim.dataset.d
    base = predict_scores(fit_glm((x, d)), x)
    x[:, col] *= c
    scaled = predict_scores(fit_glm((x, d)), x)
    assert np.max(np.abs(base - scaled)) < 1e-8


def test_resolve_scores_policies():
    sim = generate_dataset(ScenarioConfig("I", "C", 500, 5, seed=2))
    ds = sim.dataset
    assert np.array_equal(resolve_scores(ds, "external"), np.clip(sim.true_scores, 1e-6, 1 - 1e-6))
    assert np.array_equal(resolve_scores(ds, "fit_logit"), predict_scores(fit_glm(ds, "logit"), ds.x))
    assert np.array_equal(resolve_scores(ds, "probit"), predict_scores(fit_glm(ds, "probit"), ds.x))
    with pytest.raises(ConfigurationError):
        resolve_scores(ds.replace(external_scores=None), "external")
    with pytest.raises(InvalidArgumentError):
        resolve_scores(ds, "forest")
