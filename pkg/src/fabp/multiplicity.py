"""Benjamini-Hochberg step-up and simple error-rate bookkeeping."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import FabDomainError


@dataclass
class MultiplicityReport:
    rejected: np.ndarray  # sorted original indices
    threshold: float  # largest rejected p-value, 0.0 when nothing is rejected
    q: float
    fdp: float | None = None
    tpp: float | None = None

    @property
    def discoveries(self) -> int:
        return int(self.rejected.size)


def bh_reject(pvals, q: float, truth=None) -> MultiplicityReport:
    """Benjamini-Hochberg step-up at target rate ``q``.

    ``truth``, if given, is a boolean vector marking the true nulls; the
    report then carries the realized FDP and TPP.
    """
    if not 0.0 < q < 1.0:
        raise FabDomainError(f"q must lie in (0, 1), got {q}")
    p = np.asarray(pvals, dtype=float).ravel()
    m = p.size
    if m == 0:
        return MultiplicityReport(np.array([], dtype=int), 0.0, q,
                                  *(fdp_tpp([], truth) if truth is not None else (None, None)))
    if np.any(np.isnan(p)) or np.any(p < 0) or np.any(p > 1):
        raise FabDomainError("p-values must lie in [0, 1]")
    order = np.argsort(p, kind="stable")
    ok = p[order] <= q * np.arange(1, m + 1) / m
    if ok.any():
        k = int(np.flatnonzero(ok)[-1])
        threshold = float(p[order[k]])
        rejected = np.flatnonzero(p <= threshold)
    else:
        threshold = 0.0
        rejected = np.array([], dtype=int)
    rep = MultiplicityReport(rejected, threshold, q)
    if truth is not None:
        rep.fdp, rep.tpp = fdp_tpp(rejected, truth)
    return rep


def fdp_tpp(rejected, truth) -> tuple[float, float]:
    """False-discovery and true-positive proportions.

    ``truth[j]`` is True when hypothesis ``j`` is null.  Empty denominators
    count as one, so no rejections gives ``(0, 0)``.
    """
    truth = np.asarray(truth, dtype=bool)
    rej = np.zeros(truth.size, dtype=bool)
    rej[np.asarray(rejected, dtype=int)] = True
    false = int((rej & truth).sum())
    true = int((rej & ~truth).sum())
    fdp = false / max(int(rej.sum()), 1)
    tpp = true / max(int((~truth).sum()), 1)
    return fdp, tpp


def ks_statistic(pvals) -> float:
    """Kolmogorov-Smirnov distance between the empirical CDF and Uniform(0, 1)."""
    p = np.sort(np.asarray(pvals, dtype=float).ravel())
    m = p.size
    if m == 0:
        raise FabDomainError("need at least one p-value")
    i = np.arange(1, m + 1)
    return float(max(np.max(i / m - p), np.max(p - (i - 1) / m)))
