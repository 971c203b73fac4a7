"""Simulation designs I-VIII, true effects, and the Monte Carlo harness.

Replicate seeds are derived from the master seed with
``SeedSequence(master_seed, spawn_key=(r,))``; every replicate draws all of
its randomness from its own generator, so serial and parallel runs agree.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from .data import EvaluationGrid, ObservationalDataset
from .errors import InvalidArgumentError, ReliabilityWarning

OUTCOME_MODELS = ("I", "II", "III", "IV")
MECHANISMS = ("A", "B", "C", "D")

_BASE_ALPHA = np.array([1.0, -1.0, -1.0, 1.0, -1.0])
MECHANISM_ALPHA = {
    "A": _BASE_ALPHA,
    "B": np.ones(5),
    "C": 0.25 * _BASE_ALPHA,
    "D": 0.125 * _BASE_ALPHA,
}
CANONICAL = {"I": ("A", "C"), "II": ("A", "C"), "III": ("B", "D"), "IV": ("B", "D")}
SIMULATIONS = {
    "I": ("I", "A"),
    "II": ("II", "A"),
    "III": ("III", "B"),
    "IV": ("IV", "B"),
    "V": ("I", "C"),
    "VI": ("II", "C"),
    "VII": ("III", "D"),
    "VIII": ("IV", "D"),
}


@dataclass(frozen=True)
class ScenarioConfig:
    outcome_model: str
    mechanism: str
    n: int
    p: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.outcome_model not in OUTCOME_MODELS:
            raise InvalidArgumentError(f"unknown outcome model {self.outcome_model!r}")
        if self.mechanism not in MECHANISMS:
            raise InvalidArgumentError(f"unknown mechanism {self.mechanism!r}")
        if self.p < 5:
            raise InvalidArgumentError("p must be at least 5")
        if self.n < 2:
            raise InvalidArgumentError("n must be at least 2")

    @classmethod
    def simulation(cls, label: str, n: int, p: int = 5, seed: int = 0) -> "ScenarioConfig":
        """Config for one of the numbered simulations I-VIII."""
        try:
            model, mech = SIMULATIONS[label]
        except KeyError:
            raise InvalidArgumentError(f"unknown simulation {label!r}") from None
        return cls(model, mech, n, p, seed)

    @property
    def experimental(self) -> bool:
        return self.mechanism not in CANONICAL[self.outcome_model]

    @property
    def label(self) -> str:
        for name, pair in SIMULATIONS.items():
            if pair == (self.outcome_model, self.mechanism):
                return name
        return f"{self.outcome_model}/{self.mechanism}"


def true_tau(outcome_model: str, x):
    """Closed-form tau(x) for outcome models I-IV."""
    x = np.asarray(x, dtype=float)
    if outcome_model == "I":
        out = x * (2 * x + 1) ** 2 * (x - 1) ** 2
    elif outcome_model == "II":
        out = x * (1 - x) * np.cos(x) * np.log(x + 2) * np.exp(x)
    elif outcome_model == "III":
        out = x.copy()
    elif outcome_model == "IV":
        out = 5 * x**2 + x
    else:
        raise InvalidArgumentError(f"unknown outcome model {outcome_model!r}")
    return float(out) if out.ndim == 0 else out


def baseline_outcome(outcome_model: str, xl, xr):
    """f(X) shared by both potential outcomes; ``xr`` holds X^{-l}."""
    if outcome_model in ("I", "II"):
        return xl**2 * xr[:, 0] * xr[:, 1] * xr[:, 2] * xr[:, 3]
    if outcome_model == "III":
        return (xl * xr[:, 0] + np.exp(xr[:, 1] - 3) * (np.sin(xr[:, 2]) + np.cos(xr[:, 3]))) / 2
    if outcome_model == "IV":
        w = np.array([1 / 4, 1 / 8, 1 / 16, 1 / 32])
        return xl**2 * (xr[:, :4] @ w)
    raise InvalidArgumentError(f"unknown outcome model {outcome_model!r}")


def toeplitz_cov(dim: int) -> np.ndarray:
    idx = np.arange(dim)
    return 2.0 ** (-np.abs(idx[:, None] - idx[None, :]))


def mechanism_alpha(mechanism: str, p: int) -> np.ndarray:
    alpha = np.zeros(p)
    alpha[:5] = MECHANISM_ALPHA[mechanism]
    return alpha


def true_scores(mechanism: str, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    eta = x @ mechanism_alpha(mechanism, x.shape[1])
    return 1.0 / (1.0 + np.exp(-eta))


@dataclass(frozen=True, eq=False)
class SimulatedData:
    dataset: ObservationalDataset
    true_scores: np.ndarray
    y1: np.ndarray
    y0: np.ndarray


def draw_covariates(rng: np.random.Generator, n: int, p: int):
    xl = rng.uniform(-0.5, 0.5, size=n)
    chol = np.linalg.cholesky(toeplitz_cov(p - 1))
    xr = rng.standard_normal((n, p - 1)) @ chol.T
    return xl, xr


def generate_dataset(config: ScenarioConfig) -> SimulatedData:
    """Draw one dataset. Columns of X are (X^l, X^{-l}_1, ..., X^{-l}_{p-1})."""
    rng = np.random.default_rng(config.seed)
    n, p = config.n, config.p
    xl, xr = draw_covariates(rng, n, p)
    x = np.column_stack((xl, xr))
    e = true_scores(config.mechanism, x)
    d = (rng.uniform(size=n) < e).astype(float)
    f = baseline_outcome(config.outcome_model, xl, xr)
    eps = rng.standard_normal((n, 2))
    y1 = true_tau(config.outcome_model, xl) + f + eps[:, 0]
    y0 = f + eps[:, 1]
    y = np.where(d == 1, y1, y0)
    names = ("xl",) + tuple(f"x{j}" for j in range(1, p))
    ds = ObservationalDataset(x=x, xl_index=0, d=d, y=y, external_scores=e, covariate_names=names)
    return SimulatedData(dataset=ds, true_scores=e, y1=y1, y0=y0)


# --------------------------------------------------------------------------
# Monte Carlo harness
# --------------------------------------------------------------------------

METHODS = ("psr", "ipw", "aipw", "match")
GRID_QUANTILES = (0.05, 0.95)
EXCLUSION_LIMIT = 0.10


@dataclass(frozen=True)
class MetricsReport:
    bias: float
    sd: float
    mae: float
    mse: float
    cp95: float
    reps: int
    grid: EvaluationGrid | None = None
    scenario: str = ""
    method: str = ""
    n: int = 0
    p: int = 0
    exclusion_fraction: float = 0.0
    warning: str | None = None
    diagnostics: dict = field(default_factory=dict)


def compute_metrics(errors, hits) -> MetricsReport:
    """Aggregate a reps x grid matrix of errors and CI-hit indicators.

    NaN errors (missing estimates) are excluded cell by cell; NaN hits
    (missing bands) are excluded from CP95 only.
    """
    errors = np.asarray(errors, dtype=float)
    hits = np.asarray(hits, dtype=float)
    if errors.ndim != 2 or errors.size == 0:
        raise InvalidArgumentError("errors must be a nonempty reps x grid matrix")
    if hits.shape != errors.shape:
        raise InvalidArgumentError(f"hits shape {hits.shape} differs from errors shape {errors.shape}")
    reps = errors.shape[0]
    ok = np.isfinite(errors)
    excluded = 1.0 - np.count_nonzero(ok) / errors.size
    if not ok.any():
        nan = float("nan")
        return MetricsReport(nan, nan, nan, nan, nan, reps, exclusion_fraction=1.0)
    e = errors[ok]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        col_sd = np.nanstd(np.where(ok, errors, np.nan), axis=0, ddof=1)
    col_sd = col_sd[np.isfinite(col_sd)]
    hk = hits[ok & np.isfinite(hits)]
    return MetricsReport(
        bias=float(np.mean(e)),
        sd=float(np.mean(col_sd)) if col_sd.size else float("nan"),
        mae=float(np.mean(np.abs(e))),
        mse=float(np.mean(e * e)),
        cp95=float(np.mean(hk)) if hk.size else float("nan"),
        reps=reps,
        exclusion_fraction=float(excluded),
    )


def per_grid_metrics(errors, hits) -> dict:
    """Column-wise bias, MSE, coverage and missing fraction."""
    errors = np.asarray(errors, dtype=float)
    hits = np.asarray(hits, dtype=float)
    ok = np.isfinite(errors)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        hk = np.where(ok, hits, np.nan)
        return {
            "bias": np.nanmean(errors, axis=0),
            "mse": np.nanmean(errors**2, axis=0),
            "cp95": np.nanmean(hk, axis=0),
            "missing": 1.0 - ok.mean(axis=0),
        }


def scenario_grid(grid_size: int = 25) -> EvaluationGrid:
    """Evenly spaced points between the 5% and 95% quantiles of the X^l
    distribution, U(-0.5, 0.5). The grid is fixed across replicates."""
    if grid_size < 1:
        raise InvalidArgumentError("grid_size must be positive")
    lo, hi = (q - 0.5 for q in GRID_QUANTILES)
    if grid_size == 1:
        return EvaluationGrid(np.array([0.0]))
    return EvaluationGrid(np.linspace(lo, hi, grid_size))


def replicate_seed(master_seed: int, r: int) -> int:
    """64-bit seed of replicate ``r``: first word of SeedSequence(master_seed, spawn_key=(r,))."""
    ss = np.random.SeedSequence(master_seed, spawn_key=(r,))
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class MethodSettings:
    """Estimator options shared by every replicate."""

    score_policy: str = "fit_logit"
    kernel: str = "gauss"
    bandwidth: str = "ref"
    level: float = 0.95
    bootstrap: int = 100


def estimate_method(method: str, dataset: ObservationalDataset, grid: EvaluationGrid, settings: MethodSettings = MethodSettings(), seed: int = 0, scores=None):
    """Run one estimator with its band. ``scores`` overrides the score policy."""
    from .baselines import aipw_estimate, ipw_estimate, match_variant_estimate
    from .locfit import BandwidthProblem, select_bandwidth
    from .propensity import resolve_scores
    from .psr import BandwidthPolicy, psr_with_band

    if method not in METHODS:
        raise InvalidArgumentError(f"unknown method {method!r}")
    if scores is None:
        scores = resolve_scores(dataset, settings.score_policy)
    if method == "psr":
        return psr_with_band(dataset, scores, BandwidthPolicy(settings.bandwidth), grid, settings.kernel, settings.level)
    problem = BandwidthProblem(xl=dataset.xl, response=dataset.y)
    if method == "match":
        # the matching variant only swaps PSR's first stage, so it keeps PSR's h3
        h = select_bandwidth(problem, settings.bandwidth, "step2_h3", settings.kernel)
        return match_variant_estimate(dataset, scores, h, grid, seed, settings.bootstrap, settings.kernel, settings.level)
    h = select_bandwidth(problem, settings.bandwidth, "pseudo_outcome_h", settings.kernel)
    if method == "ipw":
        return ipw_estimate(dataset, scores, h, grid, settings.kernel, settings.level)
    return aipw_estimate(dataset, scores, h, grid, settings.kernel, settings.level)


def _cells(est, truth):
    err = est.tau_hat - truth
    if est.ci_lo is None:
        hit = np.full(truth.shape, np.nan)
    else:
        with np.errstate(invalid="ignore"):
            hit = ((est.ci_lo <= truth) & (truth <= est.ci_hi)).astype(float)
        hit[~np.isfinite(est.ci_lo) | ~np.isfinite(est.ci_hi)] = np.nan
    return err, hit


def run_replicate(config: ScenarioConfig, methods, grid: EvaluationGrid, settings: MethodSettings, r: int, master_seed: int):
    """One replicate: draw data once, resolve scores once, run every method.

    Returns ``{method: (errors, hits)}`` over the grid.
    """
    from .propensity import resolve_scores

    seed = replicate_seed(master_seed, r)
    sim = generate_dataset(ScenarioConfig(config.outcome_model, config.mechanism, config.n, config.p, seed))
    truth = np.asarray(true_tau(config.outcome_model, grid.points), dtype=float)
    scores = resolve_scores(sim.dataset, settings.score_policy)
    out = {}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for m in methods:
            est = estimate_method(m, sim.dataset, grid, settings, seed=seed, scores=scores)
            out[m] = _cells(est, truth)
    return out


def _replicate_task(args):
    with threadpool_limits(limits=1):
        return run_replicate(*args)


def run_comparison(
    config: ScenarioConfig,
    methods=METHODS,
    reps: int = 200,
    grid_size: int = 25,
    master_seed: int = 0,
    settings: MethodSettings = MethodSettings(),
    threads: int = 1,
) -> list[MetricsReport]:
    """Monte Carlo for several methods on paired seeds (same data per replicate)."""
    methods = tuple(methods)
    for m in methods:
        if m not in METHODS:
            raise InvalidArgumentError(f"unknown method {m!r}")
    if reps < 2:
        raise InvalidArgumentError("reps must be at least 2")
    if threads < 1:
        raise InvalidArgumentError("threads must be at least 1")
    grid = scenario_grid(grid_size)
    tasks = [(config, methods, grid, settings, r, master_seed) for r in range(reps)]
    if threads == 1:
        results = [_replicate_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(_replicate_task, tasks, chunksize=max(1, reps // (4 * threads))))
    reports = []
    for m in methods:
        errors = np.stack([res[m][0] for res in results])
        hits = np.stack([res[m][1] for res in results])
        base = compute_metrics(errors, hits)
        warn = None
        if base.exclusion_fraction > EXCLUSION_LIMIT:
            warn = f"{base.exclusion_fraction:.1%} of grid-point estimates were missing"
            warnings.warn(f"{config.label}/{m}: {warn}", ReliabilityWarning, stacklevel=2)
        reports.append(
            MetricsReport(
                **{
                    **base.__dict__,
                    "grid": grid,
                    "scenario": config.label,
                    "method": m,
                    "n": config.n,
                    "p": config.p,
                    "warning": warn,
                    "diagnostics": per_grid_metrics(errors, hits),
                }
            )
        )
    return reports


def run_monte_carlo(
    config: ScenarioConfig,
    method: str = "psr",
    score_policy: str = "fit_logit",
    reps: int = 200,
    grid_size: int = 25,
    master_seed: int = 0,
    threads: int = 1,
    settings: MethodSettings | None = None,
) -> MetricsReport:
    """Monte Carlo metrics for one method."""
    settings = settings or MethodSettings()
    settings = MethodSettings(score_policy, settings.kernel, settings.bandwidth, settings.level, settings.bootstrap)
    return run_comparison(config, (method,), reps, grid_size, master_seed, settings, threads)[0]
