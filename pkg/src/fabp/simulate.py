"""The two simulation studies: a hidden Markov mean sequence and a logistic regression.

Randomness comes from ``numpy.random.Philox`` streams.  Replicate ``i`` of
a study with seed ``s`` uses ``SeedSequence(s).spawn(reps)[i]``, so any
replicate can be regenerated on its own and results do not depend on the
number of worker threads.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .exceptions import FabDomainError, FitError, SeparationError
from .fabcore import fab_p_normal
from .glm import fit_logistic
from .indirect import CovModel
from .multiplicity import bh_reject
from .pipelines import fab_asymptotic, fab_means_z

HMM_STATES = np.array([-1.0, 0.0, 1.0])
# symmetric sticky chain; the stationary probability of the zero state is 5/9
HMM_P = np.array([
    [0.975, 0.025, 0.000],
    [0.010, 0.980, 0.010],
    [0.000, 0.025, 0.975],
])
HMM_METHODS = ("umpu", "fab_exact", "fab_shared")


def substreams(seed: int, count: int) -> list[np.random.Generator]:
    """Independent generators for replicates ``0..count-1``."""
    return [np.random.Generator(np.random.Philox(ss)) for ss in np.random.SeedSequence(seed).spawn(count)]


def _map(fn, items, threads):
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def stationary(P) -> np.ndarray:
    """Stationary law of a finite chain (left eigenvector for eigenvalue one)."""
    P = np.asarray(P, dtype=float)
    k = P.shape[0]
    A = np.vstack([P.T - np.eye(k), np.ones(k)])
    rhs = np.zeros(k + 1)
    rhs[-1] = 1.0
    pi = np.linalg.lstsq(A, rhs, rcond=None)[0]
    return np.clip(pi, 0.0, None) / np.clip(pi, 0.0, None).sum()


@dataclass(frozen=True)
class HmmSpec:
    p: int = 1000
    P: np.ndarray = field(default_factory=lambda: HMM_P.copy())
    states: np.ndarray = field(default_factory=lambda: HMM_STATES.copy())
    init: np.ndarray | None = None  # stationary law when None

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] != len(self.states):
            raise FabDomainError("transition matrix must be square with one row per state")
        if np.any(P < 0) or np.any(np.abs(P.sum(axis=1) - 1.0) > 1e-12):
            raise FabDomainError("transition rows must be non-negative and sum to one")
        if self.p < 3:
            raise FabDomainError("chain length must be at least 3")

    def initial(self) -> np.ndarray:
        return stationary(self.P) if self.init is None else np.asarray(self.init, dtype=float)

    def draw(self, rng: np.random.Generator) -> np.ndarray:
        """One realization of the mean sequence."""
        cum = np.cumsum(np.asarray(self.P, dtype=float), axis=1)
        u = rng.random(self.p)
        s = np.empty(self.p, dtype=int)
        s[0] = int(np.searchsorted(np.cumsum(self.initial()), u[0], side="right"))
        for i in range(1, self.p):
            s[i] = int(np.searchsorted(cum[s[i - 1]], u[i], side="right"))
        return np.asarray(self.states)[np.minimum(s, len(self.states) - 1)]


@dataclass
class HmmRow:
    dataset: int
    method: str
    n_null: int
    discoveries: int
    fdp: float
    tpp: float


def hmm_dataset(i: int, rng: np.random.Generator, spec: HmmSpec, q: float, methods) -> list[HmmRow]:
    theta = spec.draw(rng)
    y = theta + rng.standard_normal(spec.p)
    null = theta == 0
    cov = CovModel.diagonal(np.ones(spec.p))
    rows = []
    for method in methods:
        if method == "umpu":
            pv = fab_p_normal(y, 0.0)
        elif method == "fab_exact":
            pv = np.array([r.p_fab for r in fab_means_z(y, cov, "car", "exact")])
        elif method == "fab_shared":
            pv = np.array([r.p_fab for r in fab_means_z(y, cov, "car", "shared")])
        else:
            raise FabDomainError(f"unknown method {method!r}")
        rep = bh_reject(pv, q, truth=null)
        rows.append(HmmRow(i, method, int(null.sum()), rep.discoveries, rep.fdp, rep.tpp))
    return rows


def run_hmm_study(*, datasets: int = 100, p: int = 1000, q: float = 0.2, seed: int = 0,
                  methods=HMM_METHODS, spec: HmmSpec | None = None, threads: int = 1) -> list[HmmRow]:
    """Per-dataset BH results for each method, ordered by dataset then method."""
    spec = spec or HmmSpec(p=p)
    gens = substreams(seed, datasets)
    out = _map(lambda i: hmm_dataset(i, gens[i], spec, q, methods), range(datasets), threads)
    return [row for rows in out for row in rows]


def summarize_hmm(rows: list[HmmRow]) -> dict:
    """Mean n_null/discoveries/FDP/TPP per method."""
    out = {}
    for m in dict.fromkeys(r.method for r in rows):
        sel = [r for r in rows if r.method == m]
        out[m] = {k: float(np.mean([getattr(r, k) for r in sel]))
                  for k in ("n_null", "discoveries", "fdp", "tpp")}
    return out


@dataclass
class GlmStudyRow:
    n: int
    method: str
    null_frac: float
    nonnull_frac: float
    reps: int
    skipped: int


def glm_replicate(rng: np.random.Generator, n: int, p: int, n_signal: int, signal: float, alpha: float,
                  mode: str = "exact"):
    """Wald and FAB rejection indicators for one logistic data set, or None if it is separated."""
    theta = np.zeros(p)
    theta[:n_signal] = signal / math.sqrt(n)
    X = rng.standard_normal((n, p))
    y = (rng.random(n) < special.expit(X @ theta)).astype(float)
    try:
        fit = fit_logistic(X, y)
    except (SeparationError, FitError):
        return None
    res = fab_asymptotic(fit.theta_hat, fit.Sigma_hat, n, "spikeslab", mode)
    wald = np.array([r.p_umpu for r in res]) < alpha
    fab = np.array([r.p_fab for r in res]) < alpha
    return wald, fab


def run_glm_study(*, ns=(200, 400, 800, 1600), reps: int = 5000, p: int = 30, n_signal: int = 15,
                  signal: float = 3.0, alpha: float = 0.05, seed: int = 0, mode: str = "exact",
                  threads: int = 1) -> list[GlmStudyRow]:
    """Fractions of null and non-null p-values below ``alpha`` for Wald and FAB, per sample size."""
    if not 0 < n_signal < p:
        raise FabDomainError("need both signal and null coefficients")
    rows = []
    for k, n in enumerate(ns):
        # each n gets its own child seed so adding sizes does not change earlier results
        gens = substreams(int(np.random.SeedSequence([seed, k]).generate_state(1)[0]), reps)
        out = _map(lambda g: glm_replicate(g, n, p, n_signal, signal, alpha, mode), gens, threads)
        kept = [o for o in out if o is not None]
        skipped = len(out) - len(kept)
        for name, idx in (("wald", 0), ("fab", 1)):
            if kept:
                rej = np.array([o[idx] for o in kept])
                nonnull = float(rej[:, :n_signal].mean())
                null = float(rej[:, n_signal:].mean())
            else:
                nonnull = null = math.nan
            rows.append(GlmStudyRow(n, name, null, nonnull, len(kept), skipped))
    return rows
