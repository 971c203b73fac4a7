"""Parametric propensity scores (logit / probit) fitted by IRLS, plus the
pass-through for scores supplied with the data."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .data import SCORE_FLOOR, ObservationalDataset
from .errors import (
    ConfigurationError,
    InvalidArgumentError,
    SeparationWarning,
    SingularDesignError,
)
from .locfit import WlsProblem, wls_solve

MAX_ITER = 100
TOL = 1e-8
SEPARATION_NORM = 1e3


class Link(str, enum.Enum):
    LOGIT = "logit"
    PROBIT = "probit"


class ScorePolicy(str, enum.Enum):
    FIT_LOGIT = "fit_logit"
    FIT_PROBIT = "fit_probit"
    EXTERNAL = "external"

    @classmethod
    def parse(cls, value) -> "ScorePolicy":
        if isinstance(value, cls):
            return value
        key = str(value).lower()
        aliases = {"logit": cls.FIT_LOGIT, "probit": cls.FIT_PROBIT}
        if key in aliases:
            return aliases[key]
        try:
            return cls(key)
        except ValueError:
            raise InvalidArgumentError(f"unknown score policy {value!r}") from None


@dataclass(frozen=True)
class PropensityFit:
    alpha_hat: np.ndarray  # intercept first
    link: Link
    converged: bool
    iterations: int
    separation: bool = False
    loglik_trace: tuple = field(default=(), repr=False)


def clamp_scores(e):
    return np.clip(np.asarray(e, dtype=float), SCORE_FLOOR, 1.0 - SCORE_FLOOR)


def _mean_and_deriv(eta, link: Link):
    if link is Link.LOGIT:
        mu = special.expit(eta)
        return mu, mu * (1.0 - mu)
    return special.ndtr(eta), np.exp(-0.5 * eta * eta) / np.sqrt(2.0 * np.pi)


def _loglik(eta, d, link: Link) -> float:
    if link is Link.LOGIT:
        # log expit(eta) = -log1p(exp(-eta))
        return float(np.sum(-d * np.logaddexp(0.0, -eta) - (1.0 - d) * np.logaddexp(0.0, eta)))
    return float(np.sum(d * special.log_ndtr(eta) + (1.0 - d) * special.log_ndtr(-eta)))


def fit_glm(dataset, link="logit") -> PropensityFit:
    """Maximum-likelihood binary GLM for P(D=1 | X) by iteratively
    reweighted least squares with step halving.

    ``dataset`` is an ObservationalDataset or a ``(x, d)`` pair.
    """
    link = Link(link)
    if isinstance(dataset, ObservationalDataset):
        x, d = dataset.x, dataset.d
    else:
        x, d = dataset
    x = np.asarray(x, dtype=float)
    d = np.asarray(d, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n, p = x.shape
    if d.shape != (n,):
        raise InvalidArgumentError("x and d lengths differ")
    if d.min() == d.max():
        raise InvalidArgumentError("treatment is constant; propensity model is degenerate")
    X = np.column_stack((np.ones(n), x))
    if n <= p + 1:
        raise SingularDesignError(f"n={n} must exceed p+1={p + 1}")
    if np.linalg.matrix_rank(X) < p + 1:
        raise SingularDesignError("propensity design matrix is rank deficient")

    alpha = np.zeros(p + 1)
    eta = X @ alpha
    ll = _loglik(eta, d, link)
    trace = [ll]
    converged = False
    separation = False
    it = 0
    for it in range(1, MAX_ITER + 1):
        mu, dmu = _mean_and_deriv(eta, link)
        var = np.clip(mu * (1.0 - mu), 1e-300, None)
        w = np.clip(dmu * dmu / var, 1e-300, None)
        z = eta + (d - mu) / np.clip(dmu, 1e-300, None)
        target = wls_solve(WlsProblem(X, w, z)).coef
        step = target - alpha
        new_ll = -np.inf
        for _ in range(60):
            cand = alpha + step
            new_eta = X @ cand
            new_ll = _loglik(new_eta, d, link)
            if new_ll >= ll - 1e-12 * max(1.0, abs(ll)):
                break
            step = 0.5 * step
        else:
            break
        change = float(np.max(np.abs(cand - alpha)))
        improving = new_ll > ll
        alpha, eta, ll = cand, new_eta, new_ll
        trace.append(ll)
        if np.linalg.norm(alpha) > SEPARATION_NORM and improving:
            separation = True
            break
        if change < TOL:
            converged = True
            break
    if separation:
        warnings.warn("possible perfect separation in propensity model", SeparationWarning, stacklevel=2)
    return PropensityFit(
        alpha_hat=alpha,
        link=link,
        converged=converged,
        iterations=it,
        separation=separation,
        loglik_trace=tuple(trace),
    )


def predict_scores(fit: PropensityFit, x) -> np.ndarray:
    """Fitted scores g(x' alpha), clamped to [1e-6, 1 - 1e-6]."""
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[None, :]
    if x.shape[1] != fit.alpha_hat.size - 1:
        raise InvalidArgumentError(
            f"expected {fit.alpha_hat.size - 1} covariate columns, got {x.shape[1]}"
        )
    eta = fit.alpha_hat[0] + x @ fit.alpha_hat[1:]
    mu, _ = _mean_and_deriv(eta, fit.link)
    return clamp_scores(mu)


def resolve_scores(dataset: ObservationalDataset, policy="fit_logit") -> np.ndarray:
    """Per-row propensity scores under ``policy``."""
    policy = ScorePolicy.parse(policy)
    if policy is ScorePolicy.EXTERNAL:
        if dataset.external_scores is None:
            raise ConfigurationError("external scores requested but the dataset has none")
        return clamp_scores(dataset.external_scores)
    link = Link.LOGIT if policy is ScorePolicy.FIT_LOGIT else Link.PROBIT
    return predict_scores(fit_glm(dataset, link), dataset.x)
