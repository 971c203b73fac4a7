"""Weighted least squares, local linear smoothing, the varying-coefficient
first-stage fit, and bandwidth selection.

Every smoother in the package funnels through :func:`_wls_batch`, which
solves a stack of kernel-weighted least-squares problems with a QR
factorisation of the weighted design augmented by the response columns.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .errors import EmptyNeighborhoodError, InvalidArgumentError, SparseOverlapWarning
from .kernel import KernelKind, kernel_eval

COND_LIMIT = 1e12
RIDGE_SCALE = 1e-8
SPARSE_OVERLAP_FRACTION = 0.2
_CHUNK_ELEMENTS = 3_000_000


# --------------------------------------------------------------------------
# weighted least squares
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class WlsProblem:
    design: np.ndarray
    weights: np.ndarray
    response: np.ndarray


@dataclass(frozen=True)
class WlsSolution:
    coef: np.ndarray
    regularized: bool
    condition: float


@dataclass
class BatchSolution:
    coef: np.ndarray  # (B, k, r); NaN where empty
    regularized: np.ndarray  # (B,)
    empty: np.ndarray  # (B,)
    leverage: np.ndarray | None = None  # (B,)


def _wls_batch(
    build: Callable[[slice], tuple],
    n_problems: int,
    n_rows: int,
    k: int,
    response: np.ndarray,
    min_positive: int = 1,
    with_leverage: bool = False,
) -> BatchSolution:
    """Solve ``n_problems`` WLS problems sharing one response matrix.

    ``build(sl)`` returns ``(design, weights)`` or, when leverage is requested,
    ``(design, weights, query, query_weight)`` for the problems in ``sl``;
    shapes are (b, n, k), (b, n), (b, k), (b,).
    """
    Y = response if response.ndim == 2 else response[:, None]
    r = Y.shape[1]
    coef = np.full((n_problems, k, r), np.nan)
    regularized = np.zeros(n_problems, dtype=bool)
    empty = np.zeros(n_problems, dtype=bool)
    leverage = np.full(n_problems, np.nan) if with_leverage else None

    step = max(1, _CHUNK_ELEMENTS // max(1, n_rows * (k + r)))
    for lo in range(0, n_problems, step):
        sl = slice(lo, min(lo + step, n_problems))
        parts = build(sl)
        design, weights = parts[0], parts[1]
        b = design.shape[0]
        npos = np.count_nonzero(weights > 0, axis=1)
        bad = npos < min_positive
        empty[sl] = bad
        sw = np.sqrt(weights)[:, :, None]
        aug = np.concatenate((design * sw, np.broadcast_to(Y, (b, n_rows, r)) * sw), axis=2)
        R = np.linalg.qr(aug, mode="r")
        if R.shape[1] < k + r:
            R = np.concatenate((R, np.zeros((b, k + r - R.shape[1], k + r))), axis=1)
        Rk = R[:, :k, :k]
        qty = R[:, :k, k:]
        sv = np.linalg.svd(Rk, compute_uv=False)
        with np.errstate(divide="ignore", invalid="ignore"):
            cond = (sv[:, 0] / sv[:, -1]) ** 2
        flag = ~(cond <= COND_LIMIT) & ~bad
        regularized[sl] = flag
        Rsolve = Rk.copy()
        rhs = qty.copy()
        if flag.any():
            idx = np.flatnonzero(flag)
            lam = RIDGE_SCALE * np.einsum("bij,bij->b", Rk[idx], Rk[idx]) / k
            ridge = np.sqrt(lam)[:, None, None] * np.eye(k)[None]
            top = np.concatenate((Rk[idx], qty[idx]), axis=2)
            bottom = np.concatenate((ridge, np.zeros((idx.size, k, r))), axis=2)
            R2 = np.linalg.qr(np.concatenate((top, bottom), axis=1), mode="r")
            Rsolve[idx] = R2[:, :k, :k]
            rhs[idx] = R2[:, :k, k:]
        ok = ~bad
        if ok.any():
            block = np.full((b, k, r), np.nan)
            block[ok] = np.linalg.solve(Rsolve[ok], rhs[ok])
            coef[sl] = block
            if with_leverage:
                q, qw = parts[2], parts[3]
                z = np.linalg.solve(np.swapaxes(Rsolve[ok], 1, 2), q[ok][:, :, None])[:, :, 0]
                lev = np.full(b, np.nan)
                lev[ok] = qw[ok] * np.einsum("bi,bi->b", z, z)
                leverage[sl] = lev
    return BatchSolution(coef=coef, regularized=regularized, empty=empty, leverage=leverage)


def wls_solve(problem: WlsProblem) -> WlsSolution:
    """Minimise sum_i w_i (y_i - g_i' c)^2.

    Uses QR of the weighted design. When the weighted Gram matrix has a
    condition number above 1e12 a ridge of 1e-8 * trace / k is added and the
    solution is flagged as regularized.
    """
    design = np.asarray(problem.design, dtype=float)
    if design.ndim == 1:
        design = design[:, None]
    weights = np.asarray(problem.weights, dtype=float)
    y = np.asarray(problem.response, dtype=float)
    n, k = design.shape
    if k < 1:
        raise InvalidArgumentError("design needs at least one column")
    if weights.shape != (n,) or y.shape != (n,):
        raise InvalidArgumentError("design, weights and response lengths differ")
    if np.any(weights < 0) or not np.all(np.isfinite(weights)):
        raise InvalidArgumentError("weights must be finite and nonnegative")
    if not np.any(weights > 0):
        raise EmptyNeighborhoodError("all weights are zero")
    sol = _wls_batch(lambda sl: (design[None], weights[None]), 1, n, k, y)
    G = design.T @ (design * weights[:, None])
    with np.errstate(divide="ignore"):
        cond = float(np.linalg.cond(G)) if np.all(np.isfinite(G)) else np.inf
    return WlsSolution(coef=sol.coef[0, :, 0], regularized=bool(sol.regularized[0]), condition=cond)


# --------------------------------------------------------------------------
# local linear regression
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LocalLinearFit:
    value: float
    slope: float
    regularized: bool = False


@dataclass
class LocalLinearBatch:
    value: np.ndarray  # (m,) or (m, r)
    slope: np.ndarray
    regularized: np.ndarray
    missing: np.ndarray
    leverage: np.ndarray | None = None


def local_linear_batch(x_data, y_data, h: float, x0, kind=KernelKind.GAUSSIAN, leverage=False):
    """Local linear fits at every point of ``x0``.

    ``y_data`` may be a matrix (n, r), in which case all r responses are
    smoothed with the same weights. Points with fewer than two positively
    weighted observations come back as NaN with ``missing`` set.
    With ``leverage=True`` the hat value K_h(0) * e1'(G'WG)^{-1} e1 is
    returned, which is the self-influence when ``x0`` are the data points.
    """
    kind = KernelKind.parse(kind)
    x = np.asarray(x_data, dtype=float).ravel()
    Y = np.asarray(y_data, dtype=float)
    pts = np.atleast_1d(np.asarray(x0, dtype=float)).ravel()
    if not h > 0:
        raise InvalidArgumentError("bandwidth must be positive")
    if Y.shape[0] != x.size:
        raise InvalidArgumentError("x and y lengths differ")
    k0 = float(kernel_eval(kind, 0.0)) / h
    q = np.array([1.0, 0.0])

    def build(sl):
        u = (x[None, :] - pts[sl, None]) / h
        w = kernel_eval(kind, u) / h
        design = np.stack((np.ones_like(u), u), axis=2)
        b = u.shape[0]
        return design, w, np.broadcast_to(q, (b, 2)), np.full(b, k0)

    sol = _wls_batch(build, pts.size, x.size, 2, Y, min_positive=2, with_leverage=leverage)
    value = sol.coef[:, 0, :]
    slope = sol.coef[:, 1, :] / h
    if Y.ndim == 1:
        value, slope = value[:, 0], slope[:, 0]
    return LocalLinearBatch(value, slope, sol.regularized, sol.empty, sol.leverage)


def local_linear(x_data, y_data, h: float, x0: float, kind=KernelKind.GAUSSIAN) -> LocalLinearFit:
    """Kernel-weighted intercept+slope fit at ``x0``; the intercept is the estimate."""
    res = local_linear_batch(x_data, y_data, h, [x0], kind)
    if res.missing[0]:
        raise EmptyNeighborhoodError(f"fewer than 2 weighted points near x0={x0}")
    return LocalLinearFit(float(res.value[0]), float(res.slope[0]), bool(res.regularized[0]))


# --------------------------------------------------------------------------
# varying-coefficient first stage
# --------------------------------------------------------------------------


@dataclass
class Step1Eval:
    beta: np.ndarray
    m0: np.ndarray
    regularized: np.ndarray
    missing: np.ndarray
    leverage: np.ndarray | None = None

    @property
    def regularized_fraction(self) -> float:
        return float(np.mean(self.regularized)) if self.regularized.size else 0.0

    @property
    def sparse_overlap(self) -> bool:
        return self.regularized_fraction > SPARSE_OVERLAP_FRACTION


@dataclass
class Step1Fit:
    beta_at_sample: np.ndarray
    m0_at_sample: np.ndarray
    residuals: np.ndarray
    h1: float
    h2: float
    regularized_fraction: float = 0.0
    sparse_overlap: bool = False


def _step1_batch(xl, scores, d, y, h1, h2, points, kind, leverage=False, self_d=None):
    kind = KernelKind.parse(kind)
    xl = np.asarray(xl, dtype=float)
    e = np.asarray(scores, dtype=float)
    d = np.asarray(d, dtype=float)
    y = np.asarray(y, dtype=float)
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    if not (h1 > 0 and h2 > 0):
        raise InvalidArgumentError("bandwidths must be positive")
    if not np.all(np.isfinite(pts)):
        raise InvalidArgumentError("evaluation points must be finite")
    k00 = float(kernel_eval(kind, 0.0)) ** 2 / (h1 * h2)

    def build(sl):
        u = (xl[None, :] - pts[sl, 0:1]) / h1
        v = (e[None, :] - pts[sl, 1:2]) / h2
        w = kernel_eval(kind, u) * kernel_eval(kind, v) / (h1 * h2)
        one = np.ones_like(u)
        dd = np.broadcast_to(d, u.shape)
        design = np.stack((dd, one, dd * u, u, dd * v, v), axis=2)
        if not leverage:
            return design, w
        b = u.shape[0]
        qd = self_d[sl]
        q = np.zeros((b, 6))
        q[:, 0] = qd
        q[:, 1] = 1.0
        return design, w, q, np.full(b, k00)

    sol = _wls_batch(build, pts.shape[0], xl.size, 6, y, min_positive=1, with_leverage=leverage)
    return Step1Eval(
        beta=sol.coef[:, 0, 0],
        m0=sol.coef[:, 1, 0],
        regularized=sol.regularized,
        missing=sol.empty,
        leverage=sol.leverage,
    )


def step1_vc_fit(dataset, scores, h1: float, h2: float, eval_points, kind=KernelKind.GAUSSIAN) -> Step1Eval:
    """Varying-coefficient local linear fit of Y on D with coefficients
    smooth in (X^l, e), evaluated at each ``(xl, e)`` pair.

    Regressors per observation: (D, 1, D u, u, D v, v) with
    u = (X^l_i - xl)/h1 and v = (e_i - e)/h2, weighted by the product kernel.
    ``beta`` is the coefficient on D, ``m0`` the intercept.
    """
    res = _step1_batch(dataset.xl, scores, dataset.d, dataset.y, h1, h2, eval_points, kind)
    if res.sparse_overlap:
        warnings.warn(
            f"{res.regularized_fraction:.0%} of first-stage fits needed regularization",
            SparseOverlapWarning,
            stacklevel=2,
        )
    return res


def step1_fit_at_samples(dataset, scores, h1: float, h2: float, kind=KernelKind.GAUSSIAN) -> Step1Fit:
    """Evaluate the first stage at every sample point and form residuals
    xi_i = Y_i - beta_i D_i - m0_i."""
    scores = np.asarray(scores, dtype=float)
    pts = np.column_stack((dataset.xl, scores))
    res = step1_vc_fit(dataset, scores, h1, h2, pts, kind)
    resid = dataset.y - res.beta * dataset.d - res.m0
    return Step1Fit(
        beta_at_sample=res.beta,
        m0_at_sample=res.m0,
        residuals=resid,
        h1=float(h1),
        h2=float(h2),
        regularized_fraction=res.regularized_fraction,
        sparse_overlap=res.sparse_overlap,
    )


# --------------------------------------------------------------------------
# bandwidth selection
# --------------------------------------------------------------------------

LSCV_GRID_SIZE = 20
LSCV_RANGE = (0.1, 3.0)
LSCV_MIN_N = 20


def rot_bandwidth(values) -> float:
    """1.06 * sd * N^(-1/5)."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size < 2:
        raise InvalidArgumentError("need at least 2 observations")
    sd = float(np.std(v, ddof=1))
    if not sd > 0:
        raise InvalidArgumentError("zero-variance regressor")
    return 1.06 * sd * v.size ** (-0.2)


def reference_bandwidth(values, dims: int = 2) -> float:
    """Normal-reference bandwidth 1.06 * sd * N^(-1/(4 + dims))."""
    v = np.asarray(values, dtype=float).ravel()
    return rot_bandwidth(v) * v.size ** (0.2 - 1.0 / (4 + dims))


def score_span(scores) -> float:
    s = np.asarray(scores, dtype=float)
    span = float(np.max(s) - np.min(s))
    if not span > 0:
        raise InvalidArgumentError("scores are constant")
    return span


def lscv_multipliers() -> np.ndarray:
    return np.geomspace(LSCV_RANGE[0], LSCV_RANGE[1], LSCV_GRID_SIZE)


def _pick(scores: np.ndarray, candidates: np.ndarray, scale: float):
    finite = np.isfinite(scores)
    if not finite.any():
        return candidates[-1]
    best = np.min(scores[finite])
    # near-equal criteria count as ties; resolve toward the larger bandwidth
    tol = 1e-10 * max(scale, 1e-300)
    tied = np.flatnonzero(finite & (scores <= best + tol))
    return candidates[tied[-1]]


def loo_local_linear(x, y, h, kind=KernelKind.GAUSSIAN) -> float:
    """Mean squared leave-one-out prediction error of the local linear smoother."""
    fit = local_linear_batch(x, y, h, x, kind, leverage=True)
    denom = 1.0 - fit.leverage
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (np.asarray(y) - fit.value) / denom
    if np.any(~np.isfinite(r)) or np.any(denom <= 1e-12):
        return np.inf
    return float(np.mean(r * r))


def loo_step1(xl, scores, d, y, h1, h2, kind=KernelKind.GAUSSIAN) -> float:
    """Mean squared leave-one-out error of the varying-coefficient fit."""
    pts = np.column_stack((xl, scores))
    res = _step1_batch(xl, scores, d, y, h1, h2, pts, kind, leverage=True, self_d=np.asarray(d, float))
    fitted = res.beta * d + res.m0
    denom = 1.0 - res.leverage
    with np.errstate(divide="ignore", invalid="ignore"):
        r = (np.asarray(y) - fitted) / denom
    if np.any(~np.isfinite(r)) or np.any(denom <= 1e-12):
        return np.inf
    return float(np.mean(r * r))


@dataclass(frozen=True)
class BandwidthProblem:
    """What a bandwidth is being chosen for.

    ``xl`` is always the covariate of interest; ``response`` is the
    smoothed target (Y, the first-stage beta, or a pseudo-outcome).
    First-stage selection also needs ``d`` and ``scores``.
    """

    xl: np.ndarray
    response: np.ndarray | None = None
    d: np.ndarray | None = None
    scores: np.ndarray | None = None


TARGETS = ("step1_h1_h2", "step2_h3", "pseudo_outcome_h")


BANDWIDTH_METHODS = ("ref", "rot", "lscv")


def select_bandwidth(problem: BandwidthProblem, method: str = "ref", target: str = "step2_h3", kind=KernelKind.GAUSSIAN):
    """Choose bandwidth(s).

    Returns ``(h1, h2)`` for the first-stage target and a float otherwise.

    ``ref``
        First stage and Step 2: X^l bandwidth 1.06 * sd(X^l) * N^(-1/6) (the
        bivariate normal-reference rate of the first stage; h3 shares it) and
        a score bandwidth equal to the observed score range, so the first
        stage is local in X^l and close to globally linear in the score.
        Pseudo-outcome smoothing is a univariate regression and gets the
        univariate rule 1.06 * sd * N^(-1/5).
    ``rot``
        1.06 * sd * N^(-1/5) separately for each smoothing dimension.
    ``lscv``
        Leave-one-out CV over a 20-point log grid spanning [0.1, 3] x rot
        (one common multiplier for both first-stage dimensions).
    """
    if target not in TARGETS:
        raise InvalidArgumentError(f"unknown bandwidth target {target!r}")
    if method not in BANDWIDTH_METHODS:
        raise InvalidArgumentError(f"unknown bandwidth method {method!r}")
    xl = np.asarray(problem.xl, dtype=float)
    if method == "ref":
        if target == "pseudo_outcome_h":
            return float(reference_bandwidth(xl, dims=1))
        hx = reference_bandwidth(xl, dims=2)
        if target == "step1_h1_h2":
            if problem.scores is None:
                raise InvalidArgumentError("first-stage selection needs scores")
            return float(hx), score_span(problem.scores)
        return float(hx)
    if target == "step1_h1_h2":
        if problem.scores is None:
            raise InvalidArgumentError("first-stage selection needs scores")
        base = np.array([rot_bandwidth(xl), rot_bandwidth(problem.scores)])
    else:
        base = np.array([rot_bandwidth(xl)])
    if method == "rot":
        return (float(base[0]), float(base[1])) if base.size == 2 else float(base[0])

    if xl.size < LSCV_MIN_N:
        raise InvalidArgumentError(f"lscv needs at least {LSCV_MIN_N} observations")
    if problem.response is None:
        raise InvalidArgumentError("lscv needs a response")
    y = np.asarray(problem.response, dtype=float)
    mult = lscv_multipliers()
    if target == "step1_h1_h2":
        if problem.d is None:
            raise InvalidArgumentError("first-stage selection needs treatment")
        cv = np.array(
            [loo_step1(xl, problem.scores, problem.d, y, c * base[0], c * base[1], kind) for c in mult]
        )
    else:
        cv = np.array([loo_local_linear(xl, y, c * base[0], kind) for c in mult])
    c = _pick(cv, mult, float(np.mean(y * y)))
    return (float(c * base[0]), float(c * base[1])) if base.size == 2 else float(c * base[0])
