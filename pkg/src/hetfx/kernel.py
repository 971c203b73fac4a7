"""Smoothing kernels, the kernel constants used by the plug-in variance, and
univariate kernel density estimation."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate

from .errors import InvalidArgumentError

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class KernelKind(str, enum.Enum):
    GAUSSIAN = "gauss"
    EPANECHNIKOV = "epan"

    @classmethod
    def parse(cls, value) -> "KernelKind":
        if isinstance(value, cls):
            return value
        key = str(value).lower()
        aliases = {
            "gauss": cls.GAUSSIAN,
            "gaussian": cls.GAUSSIAN,
            "epan": cls.EPANECHNIKOV,
            "epanechnikov": cls.EPANECHNIKOV,
        }
        try:
            return aliases[key]
        except KeyError:
            raise InvalidArgumentError(f"unknown kernel {value!r}") from None

    @property
    def support(self) -> float:
        """Half-width of the support (``inf`` for the Gaussian)."""
        return math.inf if self is KernelKind.GAUSSIAN else 1.0


def kernel_eval(kind, u):
    """Evaluate the kernel at ``u`` (scalar or array)."""
    kind = KernelKind.parse(kind)
    u = np.asarray(u, dtype=float)
    if kind is KernelKind.GAUSSIAN:
        out = _INV_SQRT_2PI * np.exp(-0.5 * u * u)
    else:
        out = np.where(np.abs(u) <= 1.0, 0.75 * (1.0 - u * u), 0.0)
    return out[()] if out.ndim == 0 else out


def scaled_kernel(kind, u, h):
    """K_h(u) = K(u / h) / h."""
    return kernel_eval(kind, np.asarray(u, dtype=float) / h) / h


@dataclass(frozen=True)
class KernelConstants:
    nu: float
    kbar_sq_integral: float
    ratio: float


def _integrate_line(f, kind: KernelKind, half_width: float, points=None) -> float:
    if math.isinf(half_width):
        val, _ = integrate.quad(f, -np.inf, np.inf, epsabs=1e-11, epsrel=1e-11, limit=200)
        return val
    val, _ = integrate.quad(
        f, -half_width, half_width, epsabs=1e-11, epsrel=1e-11, limit=200, points=points
    )
    return val


@lru_cache(maxsize=256)
def _constants(kind: KernelKind, ratio: float) -> KernelConstants:
    nu = _integrate_line(lambda t: kernel_eval(kind, t) ** 2, kind, kind.support)

    def kbar(x: float) -> float:
        if ratio == 0.0:
            return float(kernel_eval(kind, x))

        def inner(t):
            return kernel_eval(kind, t) * kernel_eval(kind, x + ratio * t)

        if kind is KernelKind.GAUSSIAN:
            return _integrate_line(inner, kind, math.inf)
        # the second factor switches on/off where |x + ratio*t| = 1
        breaks = sorted(
            b for b in ((-1.0 - x) / ratio, (1.0 - x) / ratio) if -1.0 < b < 1.0
        )
        return _integrate_line(inner, kind, 1.0, points=breaks or None)

    width = kind.support * (1.0 + ratio)
    points = None if math.isinf(width) else [-1.0, 0.0, 1.0]
    kbar_sq = _integrate_line(lambda x: kbar(x) ** 2, kind, width, points=points)
    return KernelConstants(nu=nu, kbar_sq_integral=kbar_sq, ratio=ratio)


def kernel_constants(kind, h1: float, h3: float) -> KernelConstants:
    """Return nu = int K^2 and int Kbar^2 for the bandwidth ratio h1 / h3.

    Kbar(x) = int K(t) K(x + (h1/h3) t) dt. Both integrals use adaptive
    quadrature, so every kernel goes through the same code path.
    """
    kind = KernelKind.parse(kind)
    if not (h1 > 0 and h3 > 0):
        raise InvalidArgumentError("bandwidths must be positive")
    return _constants(kind, float(h1) / float(h3))


def constants_for_ratio(kind, ratio: float) -> KernelConstants:
    """Kernel constants for a given h1/h3 ratio; ``ratio = 0`` gives Kbar = K."""
    kind = KernelKind.parse(kind)
    if not (ratio >= 0 and math.isfinite(ratio)):
        raise InvalidArgumentError("ratio must be finite and nonnegative")
    return _constants(kind, float(ratio))


def silverman_bandwidth(samples) -> float:
    """Rule-of-thumb bandwidth 1.06 * sd * n^(-1/5)."""
    s = np.asarray(samples, dtype=float)
    if s.size < 2:
        raise InvalidArgumentError("need at least 2 samples")
    sd = float(np.std(s, ddof=1))
    if not sd > 0:
        raise InvalidArgumentError("zero-variance sample")
    return 1.06 * sd * s.size ** (-0.2)


def kde(samples, h: float | None, x, kind=KernelKind.GAUSSIAN):
    """Kernel density estimate f(x) = (1/(N h)) sum K((x - s_i)/h).

    ``x`` may be a scalar or an array; ``h=None`` uses the Silverman rule.
    """
    s = np.asarray(samples, dtype=float).ravel()
    if s.size < 2:
        raise InvalidArgumentError("kde needs at least 2 samples")
    if h is None:
        h = silverman_bandwidth(s)
    if not h > 0:
        raise InvalidArgumentError("bandwidth must be positive")
    xs = np.asarray(x, dtype=float)
    flat = np.atleast_1d(xs).ravel()
    out = np.empty(flat.size)
    # chunk to bound memory at large N
    step = max(1, 2_000_000 // s.size)
    for lo in range(0, flat.size, step):
        block = flat[lo : lo + step]
        out[lo : lo + step] = kernel_eval(kind, (block[:, None] - s[None, :]) / h).sum(axis=1)
    out /= s.size * h
    return float(out[0]) if xs.ndim == 0 else out.reshape(xs.shape)
