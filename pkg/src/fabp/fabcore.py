"""Scalar FAB p-value mathematics.

The FAB p-value for a standardized statistic ``z`` and shift ``b`` is
``1 - |Phi(z + b) - Phi(-z)|``.  It is symmetric and unimodal around
``-b/2`` and is uniform on (0, 1) whenever ``z`` is standard normal and
``b`` is independent of ``z``.  ``b = 0`` gives the usual two-sided
(UMPU) p-value and ``b -> +/-inf`` the one-sided ones.

All functions here are pure and accept numpy arrays where noted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize, special

from .exceptions import FabDomainError

# Beyond this the two CDF terms differ from the one-sided limit by less
# than Phi(-20) ~ 3e-89, far below double precision relative to p.
ONE_SIDED_LIMIT = 40.0

_SQRT_2PI = math.sqrt(2.0 * math.pi)


@dataclass(frozen=True)
class GuessParams:
    """Normal guess N(mu, tau2) for theta together with the sampling sd."""

    mu: float
    tau2: float
    sigma: float

    def __post_init__(self):
        if not self.tau2 > 0:
            raise FabDomainError(f"tau2 must be positive, got {self.tau2}")
        if not (self.sigma > 0 and math.isfinite(self.sigma)):
            raise FabDomainError(f"sigma must be positive and finite, got {self.sigma}")

    @property
    def shift(self) -> float:
        return fab_shift(self.mu, self.tau2, self.sigma)


@dataclass(frozen=True)
class AltRoots:
    """The two statistic values at which the p-value function equals ``u``."""

    z_l: float
    z_h: float
    u: float


def fab_shift(mu, tau2, sigma):
    """Shift ``b = 2 mu sigma / tau2``; an infinite ``tau2`` gives 0."""
    if np.isinf(tau2):
        return 0.0
    return 2.0 * mu * sigma / tau2


def norm_pdf(x):
    return np.exp(-0.5 * np.square(x)) / _SQRT_2PI


def _fab_p(z, b, cdf):
    # p = F(-a - b/2) + F(-a + b/2) with a = |z + b/2|: both terms are
    # lower-tail evaluations, so small p-values keep full relative accuracy.
    z = np.asarray(z, dtype=float)
    b = np.asarray(b, dtype=float)
    if not np.all(np.isfinite(z)):
        raise FabDomainError("statistic must be finite")
    if np.any(np.isnan(b)):
        raise FabDomainError("shift must not be NaN")
    z, b = np.broadcast_arrays(z, b)
    big = np.abs(b) > ONE_SIDED_LIMIT
    bf = np.where(big, 0.0, b)
    a = np.abs(z + bf / 2.0)
    p = cdf(-a - bf / 2.0) + cdf(-a + bf / 2.0)
    # one-sided limits: b -> +inf gives 1 - F(z) = F(-z), b -> -inf gives F(z)
    p = np.where(big, cdf(np.where(b > 0, -z, z)), p)
    p = np.minimum(p, 1.0)
    return p[()] if p.ndim == 0 else p


def fab_p_normal(z, b):
    """FAB p-value ``1 - |Phi(z + b) - Phi(-z)|`` for a normal statistic.

    ``b`` may be infinite; ``|b| > 40`` is evaluated as the exact one-sided
    limit.  Broadcasts over array arguments.
    """
    return _fab_p(z, b, special.ndtr)


def t_cdf(x, df):
    """CDF of Student's t with ``df`` degrees of freedom (``df=inf`` is normal)."""
    df = np.asarray(df, dtype=float)
    if np.any(df < 1):
        raise FabDomainError("t degrees of freedom must be >= 1")
    return np.where(np.isinf(df), special.ndtr(x), special.stdtr(np.where(np.isinf(df), 1.0, df), x))


def fab_p_symmetric(t, b, cdf: Callable | None = None, *, df=None):
    """FAB p-value ``1 - |F(t + b) - F(-t)|`` for a symmetric null CDF ``F``.

    Pass either a vectorized ``cdf`` continuous and symmetric about zero, or
    ``df`` to use the t distribution (the usual case when the scale is
    estimated).  With neither, ``F`` is the standard normal CDF.
    """
    if cdf is not None and df is not None:
        raise FabDomainError("give either cdf or df, not both")
    if df is not None:
        dfa = np.asarray(df, dtype=float)
        if np.any(np.isnan(dfa)) or np.any(dfa < 1):
            raise FabDomainError(f"t degrees of freedom must be >= 1, got {df}")
        return _fab_p(t, b, lambda x: t_cdf(x, dfa))
    if cdf is None:
        cdf = special.ndtr
    return _fab_p(t, b, cdf)


def _half_width(u, b):
    """Solve Phi(-c - b/2) + Phi(-c + b/2) = u for c >= 0."""
    hb = b / 2.0

    def h(c):
        return special.ndtr(-c - hb) + special.ndtr(-c + hb) - u

    if h(0.0) <= 0.0:
        return 0.0
    hi = abs(hb) + 10.0
    while h(hi) > 0.0:
        hi *= 2.0
    return optimize.brentq(h, 0.0, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)


def fab_threshold(g: GuessParams, alpha: float) -> float:
    """Rejection threshold ``c`` of the level-``alpha`` FAB test.

    The test rejects when ``|Y + mu sigma^2 / tau2| > c``; ``c`` solves
    ``[Phi(c/sigma + k) + Phi(c/sigma - k)] / 2 = 1 - alpha/2`` with
    ``k = mu sigma / tau2``.
    """
    if not 0.0 < alpha <= 1.0:
        raise FabDomainError(f"alpha must lie in (0, 1], got {alpha}")
    if alpha == 1.0:
        return 0.0
    return g.sigma * _half_width(alpha, g.shift)


def alt_roots(u: float, b: float) -> AltRoots:
    """Roots ``z_l < -b/2 < z_h`` of ``p(z, b) = u``."""
    if not 0.0 < u < 1.0:
        raise FabDomainError(f"u must lie in (0, 1), got {u}")
    if not math.isfinite(b):
        raise FabDomainError("alt_roots needs a finite shift")
    c = _half_width(u, b)
    return AltRoots(z_l=-b / 2.0 - c, z_h=-b / 2.0 + c, u=u)


def alt_cdf(u: float, theta: float, b: float) -> float:
    """``Pr(p(Z, b) <= u)`` for ``Z ~ N(theta, 1)``; at ``u = alpha`` this is the power."""
    r = alt_roots(u, b)
    return float(special.ndtr(r.z_l - theta) + special.ndtr(theta - r.z_h))


def alt_pdf(u: float, theta: float, b: float) -> float:
    """Density of ``p(Z, b)`` for ``Z ~ N(theta, 1)``, by implicit differentiation."""
    r = alt_roots(u, b)
    lo = norm_pdf(r.z_l - theta) / (norm_pdf(-r.z_l) + norm_pdf(r.z_l + b))
    hi = norm_pdf(r.z_h - theta) / (norm_pdf(-r.z_h) + norm_pdf(r.z_h + b))
    return float(lo + hi)
