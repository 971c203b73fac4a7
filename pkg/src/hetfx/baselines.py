"""Competing estimators: IPW and AIPW pseudo-outcome smoothing, and the
matching variant of PSR with a bootstrap band.

IPW/AIPW bands use the local-linear sandwich nu * sigma^2(x) / (N h f(x)),
where sigma^2(x) smooths the squared centred pseudo-outcomes. This is an
approximation; it is not the exact interval construction of the original
IPW/AIPW proposals.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .data import EvaluationGrid, ObservationalDataset
from .errors import InvalidArgumentError
from .kernel import KernelKind, kde, kernel_constants
from .locfit import local_linear_batch
from .propensity import clamp_scores
from .psr import HTEEstimate, confidence_band


def ipw_pseudo_outcome(d, y, scores) -> np.ndarray:
    """Z = D Y / e - (1 - D) Y / (1 - e)."""
    d = np.asarray(d, dtype=float)
    y = np.asarray(y, dtype=float)
    e = np.asarray(scores, dtype=float)
    return d * y / e - (1.0 - d) * y / (1.0 - e)


def aipw_pseudo_outcome(d, y, scores, mu1, mu0) -> np.ndarray:
    """D (Y - mu1) / e - (1 - D)(Y - mu0) / (1 - e) + mu1 - mu0."""
    d = np.asarray(d, dtype=float)
    y = np.asarray(y, dtype=float)
    e = np.asarray(scores, dtype=float)
    return d * (y - mu1) / e - (1.0 - d) * (y - mu0) / (1.0 - e) + (mu1 - mu0)


@dataclass(frozen=True)
class OutcomeModels:
    mu1: np.ndarray
    mu0: np.ndarray
    coef1: np.ndarray
    coef0: np.ndarray
    regularized: bool


def _ols(X, y):
    rank = np.linalg.matrix_rank(X)
    if rank < X.shape[1]:
        G = X.T @ X
        lam = 1e-8 * np.trace(G) / X.shape[1]
        return np.linalg.solve(G + lam * np.eye(X.shape[1]), X.T @ y), True
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    return coef, False


def fit_outcome_models(dataset: ObservationalDataset) -> OutcomeModels:
    """Arm-wise OLS of Y on (1, X); predictions for every unit."""
    X = np.column_stack((np.ones(dataset.n), dataset.x))
    k = X.shape[1]
    treated = dataset.d == 1
    for arm, mask in (("treated", treated), ("control", ~treated)):
        if np.count_nonzero(mask) <= k:
            raise InvalidArgumentError(f"{arm} arm needs more than p+1={k} units for the outcome model")
    c1, r1 = _ols(X[treated], dataset.y[treated])
    c0, r0 = _ols(X[~treated], dataset.y[~treated])
    return OutcomeModels(X @ c1, X @ c0, c1, c0, r1 or r0)


def _smooth_pseudo(dataset, z, h3, grid, kind, method, level, extra_diag=None) -> HTEEstimate:
    kind = KernelKind.parse(kind)
    xl = dataset.xl
    m = len(grid)
    fit = local_linear_batch(xl, z, h3, np.concatenate((grid.points, xl)), kind)
    tau = fit.value[:m]
    centred = (z - fit.value[m:]) ** 2
    ok = np.isfinite(centred)
    s2 = local_linear_batch(xl[ok], centred[ok], h3, grid.points, kind).value
    s2 = np.maximum(s2, 0.0)
    f = np.atleast_1d(kde(xl, None, grid.points, kind))
    nu = kernel_constants(kind, h3, h3).nu
    with np.errstate(divide="ignore", invalid="ignore"):
        var = nu * s2 / (dataset.n * h3 * f)
    var = np.where((s2 > 0) & (f >= 1e-10) & np.isfinite(tau), var, np.nan)
    diag = {"missing_points": int(np.count_nonzero(fit.missing[:m]))}
    diag.update(extra_diag or {})
    est = HTEEstimate(grid=grid, tau_hat=tau, method=method, bandwidths={"h3": float(h3)}, variance=var, diagnostics=diag)
    return confidence_band(est, level)


def ipw_estimate(dataset, scores, h3: float, grid: EvaluationGrid, kind=KernelKind.GAUSSIAN, level: float = 0.95) -> HTEEstimate:
    """Local linear regression of the IPW pseudo-outcome on X^l."""
    e = clamp_scores(scores)
    z = ipw_pseudo_outcome(dataset.d, dataset.y, e)
    return _smooth_pseudo(dataset, z, h3, grid, kind, "ipw", level, {"score_range": (float(e.min()), float(e.max()))})


def aipw_estimate(dataset, scores, h3: float, grid: EvaluationGrid, kind=KernelKind.GAUSSIAN, level: float = 0.95) -> HTEEstimate:
    """Local linear regression of the AIPW pseudo-outcome (linear arm models) on X^l."""
    e = clamp_scores(scores)
    om = fit_outcome_models(dataset)
    z = aipw_pseudo_outcome(dataset.d, dataset.y, e, om.mu1, om.mu0)
    diag = {"score_range": (float(e.min()), float(e.max())), "outcome_model_regularized": om.regularized}
    return _smooth_pseudo(dataset, z, h3, grid, kind, "aipw", level, diag)


# --------------------------------------------------------------------------
# matching variant
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class MatchedPairs:
    pairs: np.ndarray  # (n, 2): unit index, matched opposite-arm index
    imputed_y1: np.ndarray
    imputed_y0: np.ndarray
    euclidean_fallback: bool = False


def _whitener(z: np.ndarray):
    cov = np.cov(z, rowvar=False)
    try:
        if np.linalg.cond(cov) > 1e12:
            raise np.linalg.LinAlgError
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        return None
    return np.linalg.inv(chol)


def _nearest(tree_pts: np.ndarray, tree_idx: np.ndarray, queries: np.ndarray) -> np.ndarray:
    """Nearest tree point per query; exact distance ties go to the lowest index."""
    k = min(8, tree_pts.shape[0])
    tree = cKDTree(tree_pts)
    dist, pos = tree.query(queries, k=k)
    if k == 1:
        return tree_idx[pos]
    dist = np.asarray(dist).reshape(len(queries), k)
    pos = np.asarray(pos).reshape(len(queries), k)
    out = np.empty(len(queries), dtype=np.int64)
    tied = dist <= dist[:, :1]
    cand = np.where(tied, tree_idx[pos], np.iinfo(np.int64).max)
    out[:] = cand.min(axis=1)
    overflow = np.flatnonzero(tied.all(axis=1) & (k < tree_pts.shape[0]))
    for i in overflow:
        d2 = np.sum((tree_pts - queries[i]) ** 2, axis=1)
        out[i] = tree_idx[np.flatnonzero(d2 <= d2.min())].min()
    return out


def match_pairs(xl, scores, d, y) -> MatchedPairs:
    """1:1 nearest-neighbour matching with replacement on (X^l, e) under the
    Mahalanobis metric of the pooled sample covariance."""
    xl = np.asarray(xl, dtype=float)
    e = np.asarray(scores, dtype=float)
    d = np.asarray(d, dtype=float)
    y = np.asarray(y, dtype=float)
    z = np.column_stack((xl, e))
    treated = np.flatnonzero(d == 1)
    control = np.flatnonzero(d == 0)
    if treated.size == 0 or control.size == 0:
        raise InvalidArgumentError("matching needs both arms")
    W = _whitener(z)
    fallback = W is None
    zw = z if fallback else z @ W.T
    match = np.empty(d.size, dtype=np.int64)
    match[treated] = _nearest(zw[control], control, zw[treated])
    match[control] = _nearest(zw[treated], treated, zw[control])
    y1 = np.where(d == 1, y, y[match])
    y0 = np.where(d == 0, y, y[match])
    pairs = np.column_stack((np.arange(d.size), match))
    return MatchedPairs(pairs, y1, y0, fallback)


def _match_tau(xl, e, d, y, h3, points, kind):
    mp = match_pairs(xl, e, d, y)
    return local_linear_batch(xl, mp.imputed_y1 - mp.imputed_y0, h3, points, kind).value, mp


def bootstrap_rng(seed: int, b: int) -> np.random.Generator:
    """Generator for bootstrap resample ``b``: SeedSequence(seed, spawn_key=(b,))."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(b,)))


def match_variant_estimate(
    dataset,
    scores,
    h3: float,
    grid: EvaluationGrid,
    seed: int = 0,
    bootstrap_b: int = 100,
    kind=KernelKind.GAUSSIAN,
    level: float = 0.95,
) -> HTEEstimate:
    """PSR with the first stage replaced by matching-based imputation.

    The band is a percentile bootstrap over ``bootstrap_b`` resamples of the
    rows (with their scores); each resample is re-matched. Resample ``b``
    draws from :func:`bootstrap_rng`, so results do not depend on the order
    in which resamples are computed.
    """
    kind = KernelKind.parse(kind)
    e = clamp_scores(scores)
    xl, d, y = dataset.xl, dataset.d, dataset.y
    tau, mp = _match_tau(xl, e, d, y, h3, grid.points, kind)
    diag = {"euclidean_fallback": mp.euclidean_fallback, "score_range": (float(e.min()), float(e.max()))}
    est = HTEEstimate(grid=grid, tau_hat=tau, method="match_psr", bandwidths={"h3": float(h3)}, diagnostics=diag)
    if bootstrap_b < 2:
        return est
    n = dataset.n
    draws = np.full((bootstrap_b, len(grid)), np.nan)
    for b in range(bootstrap_b):
        idx = bootstrap_rng(seed, b).integers(0, n, n)
        db = d[idx]
        if db.min() == db.max():
            continue
        draws[b] = _match_tau(xl[idx], e[idx], db, y[idx], h3, grid.points, kind)[0]
    alpha = 1.0 - level
    good = np.isfinite(draws)
    enough = good.sum(axis=0) >= 2
    with np.errstate(invalid="ignore"):
        lo = np.where(enough, np.nanquantile(np.where(good, draws, np.nan), alpha / 2, axis=0), np.nan)
        hi = np.where(enough, np.nanquantile(np.where(good, draws, np.nan), 1 - alpha / 2, axis=0), np.nan)
        var = np.where(enough, np.nanvar(draws, axis=0, ddof=1), np.nan)
    diag["bootstrap_failed"] = int(np.count_nonzero(~np.isfinite(draws).all(axis=1)))
    return replace(est, variance=var, ci_lo=lo, ci_hi=hi, level=level, diagnostics=diag)
