"""The propensity score regression pipeline, its plug-in variance and
pointwise confidence bands."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import special

from .data import EvaluationGrid, ObservationalDataset
from .errors import InvalidArgumentError, SparseOverlapWarning
from .kernel import KernelKind, kde, kernel_constants
from .locfit import (
    BandwidthProblem,
    Step1Fit,
    local_linear_batch,
    select_bandwidth,
    step1_fit_at_samples,
)
from .propensity import clamp_scores, resolve_scores

DENSITY_FLOOR = 1e-10


@dataclass(frozen=True)
class HTEEstimate:
    grid: EvaluationGrid
    tau_hat: np.ndarray
    method: str
    bandwidths: dict = field(default_factory=dict)
    variance: np.ndarray | None = None
    ci_lo: np.ndarray | None = None
    ci_hi: np.ndarray | None = None
    level: float | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def missing(self) -> np.ndarray:
        return ~np.isfinite(self.tau_hat)


@dataclass(frozen=True)
class BandwidthPolicy:
    """How to pick (h1, h2, h3). Explicit values override the selector."""

    method: str = "ref"
    h1: float | None = None
    h2: float | None = None
    h3: float | None = None


@dataclass
class PSRFit:
    estimate: HTEEstimate
    scores: np.ndarray  # probability scale
    smoothing_scores: np.ndarray  # the scale the first stage smoothed on
    step1: Step1Fit
    tau_on_samples: np.ndarray
    h3: float


def _transform(scores, scale: str):
    if scale == "prob":
        return scores
    if scale == "logit":
        return special.logit(scores)
    raise InvalidArgumentError(f"unknown score scale {scale!r}")


def _scores_from(dataset, score_policy):
    if isinstance(score_policy, (np.ndarray, list, tuple)):
        s = np.asarray(score_policy, dtype=float)
        if s.shape != (dataset.n,):
            raise InvalidArgumentError("score vector length differs from n")
        return clamp_scores(s)
    return resolve_scores(dataset, score_policy)


def fit_psr(
    dataset: ObservationalDataset,
    score_policy="fit_logit",
    bandwidth_policy: BandwidthPolicy | None = None,
    grid: EvaluationGrid | None = None,
    kind=KernelKind.GAUSSIAN,
    score_scale: str = "prob",
) -> PSRFit:
    """Run Steps 0-2 and keep the intermediate quantities the variance needs.

    ``score_policy`` is a policy name or a ready score vector.
    ``score_scale='logit'`` smooths on logit(e) instead of e.
    """
    from .data import default_grid

    kind = KernelKind.parse(kind)
    bw = bandwidth_policy or BandwidthPolicy()
    grid = grid if grid is not None else default_grid(dataset)
    xl = dataset.xl
    lo, hi = xl.min(), xl.max()
    if grid.points[0] < lo or grid.points[-1] > hi:
        raise InvalidArgumentError("grid extends outside the observed range of X^l")

    e = _scores_from(dataset, score_policy)
    s = _transform(e, score_scale)

    if bw.h1 is None or bw.h2 is None:
        problem = BandwidthProblem(xl=xl, response=dataset.y, d=dataset.d, scores=s)
        h1, h2 = select_bandwidth(problem, bw.method, "step1_h1_h2", kind)
        h1 = bw.h1 if bw.h1 is not None else h1
        h2 = bw.h2 if bw.h2 is not None else h2
    else:
        h1, h2 = bw.h1, bw.h2
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", SparseOverlapWarning)
        step1 = step1_fit_at_samples(dataset, s, h1, h2, kind)
    beta = step1.beta_at_sample
    ok = np.isfinite(beta)
    if bw.h3 is not None:
        h3 = bw.h3
    else:
        h3 = select_bandwidth(BandwidthProblem(xl=xl[ok], response=beta[ok]), bw.method, "step2_h3", kind)

    both = local_linear_batch(xl[ok], beta[ok], h3, np.concatenate((grid.points, xl)), kind)
    m = len(grid)
    tau = both.value[:m]
    tau_samples = both.value[m:]
    diagnostics = {
        "regularized_fraction": step1.regularized_fraction,
        "sparse_overlap": step1.sparse_overlap,
        "score_range": (float(e.min()), float(e.max())),
        "missing_points": int(np.count_nonzero(both.missing[:m])),
    }
    if step1.sparse_overlap:
        warnings.warn(
            f"{step1.regularized_fraction:.0%} of first-stage fits were regularized",
            SparseOverlapWarning,
            stacklevel=2,
        )
    est = HTEEstimate(
        grid=grid,
        tau_hat=tau,
        method="psr",
        bandwidths={"h1": float(h1), "h2": float(h2), "h3": float(h3)},
        diagnostics=diagnostics,
    )
    return PSRFit(estimate=est, scores=e, smoothing_scores=s, step1=step1, tau_on_samples=tau_samples, h3=float(h3))


def psr_estimate(dataset, score_policy="fit_logit", bandwidth_policy=None, grid=None, kind=KernelKind.GAUSSIAN, score_scale="prob") -> HTEEstimate:
    """tau-hat on the grid, without variance."""
    return fit_psr(dataset, score_policy, bandwidth_policy, grid, kind, score_scale).estimate


@dataclass
class VarianceComponents:
    variance: np.ndarray
    beta_variance: np.ndarray  # smoothed (beta - tau)^2, floored at 0
    weighted_residual: np.ndarray  # smoothed (D-e)^2 xi^2 / (e(1-e))^2, floored at 0
    density: np.ndarray
    nu: float
    kbar_sq_integral: float
    diagnostics: dict


def psr_variance_components(dataset, scores, step1: Step1Fit, tau_on_samples, h3: float, grid: EvaluationGrid, kind=KernelKind.GAUSSIAN, density_bandwidth=None) -> VarianceComponents:
    kind = KernelKind.parse(kind)
    xl = dataset.xl
    e = np.asarray(scores, dtype=float)
    n = dataset.n
    centered = (step1.beta_at_sample - np.asarray(tau_on_samples)) ** 2
    resid = (dataset.d - e) ** 2 * step1.residuals**2 / (e**2 * (1.0 - e) ** 2)
    targets = np.column_stack((centered, resid))
    ok = np.all(np.isfinite(targets), axis=1)
    fit = local_linear_batch(xl[ok], targets[ok], h3, grid.points, kind)
    vb = np.maximum(fit.value[:, 0], 0.0)
    vr = np.maximum(fit.value[:, 1], 0.0)
    f = np.atleast_1d(kde(xl, density_bandwidth, grid.points, kind))
    const = kernel_constants(kind, step1.h1, h3)
    with np.errstate(divide="ignore", invalid="ignore"):
        v = (const.nu * vb + const.kbar_sq_integral * vr) / (n * h3 * f)
    both_zero = (vb == 0) & (vr == 0)
    low_density = f < DENSITY_FLOOR
    v = np.where(both_zero | low_density | fit.missing, np.nan, v)
    diag = {
        "density_underflow": int(np.count_nonzero(low_density)),
        "zero_variance_points": int(np.count_nonzero(both_zero)),
    }
    return VarianceComponents(v, vb, vr, f, const.nu, const.kbar_sq_integral, diag)


def psr_variance(dataset, scores, step1: Step1Fit, tau_on_samples, h3: float, grid: EvaluationGrid, kind=KernelKind.GAUSSIAN) -> np.ndarray:
    """Plug-in asymptotic variance of tau-hat at each grid point.

    V(x) = [nu * Var(beta | x) + int Kbar^2 * E((D-e)^2 xi^2 / (e(1-e))^2 | x)]
           / (N h3 f(x)).
    Points where the variance cannot be formed are NaN.
    """
    return psr_variance_components(dataset, scores, step1, tau_on_samples, h3, grid, kind).variance


def normal_quantile(p):
    return special.ndtri(p)


def confidence_band(estimate: HTEEstimate, level: float = 0.95) -> HTEEstimate:
    """Pointwise tau-hat +/- z * sqrt(V)."""
    if not 0 < level < 1:
        raise InvalidArgumentError("level must lie in (0, 1)")
    if estimate.variance is None:
        raise InvalidArgumentError("estimate carries no variance")
    z = float(normal_quantile(0.5 * (1.0 + level)))
    var = np.asarray(estimate.variance, dtype=float)
    half = z * np.sqrt(var)
    diag = dict(estimate.diagnostics)
    diag["degenerate_band"] = int(np.count_nonzero(var == 0))
    return replace(estimate, ci_lo=estimate.tau_hat - half, ci_hi=estimate.tau_hat + half, level=level, diagnostics=diag)


def psr_with_band(dataset, score_policy="fit_logit", bandwidth_policy=None, grid=None, kind=KernelKind.GAUSSIAN, level=0.95, score_scale="prob") -> HTEEstimate:
    fit = fit_psr(dataset, score_policy, bandwidth_policy, grid, kind, score_scale)
    comp = psr_variance_components(dataset, fit.scores, fit.step1, fit.tau_on_samples, fit.h3, fit.estimate.grid, kind)
    diag = dict(fit.estimate.diagnostics)
    diag.update(comp.diagnostics)
    est = replace(fit.estimate, variance=comp.variance, diagnostics=diag)
    return confidence_band(est, level)
