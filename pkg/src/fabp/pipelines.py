"""Adaptive FAB p-values for the four data regimes.

* ``fab_means_z``: normal estimates with known covariance.
* ``fab_means_t``: group means with estimated within-group variances
  (Fay-Herriot linking, t statistics).
* ``fab_lm`` / ``fab_lm_partial``: OLS coefficients, covariance known up to
  the error variance.
* ``fab_asymptotic``: any asymptotically normal estimator with an estimated
  covariance (e.g. a logistic regression fit).

Each hypothesis ``j`` gets a shift computed only from data that exclude its
direct statistic (``exact``), from data outside its contiguous block
(``blocked:K``), or from a single fit to all data (``shared``; fast, only
approximately uniform under the null).
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from . import linking as lk
from .exceptions import ConditioningError, FabDomainError, FabError, RankError
from .fabcore import fab_p_normal, fab_p_symmetric
from .indirect import CovModel

FALLBACK_FLAG = "umpu_fallback"


class FallbackWarning(UserWarning):
    """A per-hypothesis fit failed and the shift was set to zero."""


@dataclass(frozen=True)
class Mode:
    kind: str = "exact"
    k: int | None = None

    def __post_init__(self):
        if self.kind not in ("exact", "blocked", "shared"):
            raise FabDomainError(f"unknown mode {self.kind!r}")
        if self.kind == "blocked" and (self.k is None or self.k < 2):
            raise FabDomainError("blocked mode needs at least two blocks")

    @classmethod
    def parse(cls, text) -> "Mode":
        if isinstance(text, Mode):
            return text
        kind, _, k = str(text).partition(":")
        kind = kind.strip().lower()
        if kind == "blocked":
            if not k:
                raise FabDomainError("blocked mode is written blocked:K")
            try:
                return cls("blocked", int(k))
            except ValueError:
                raise FabDomainError(f"bad block count {k!r}") from None
        return cls(kind)

    def blocks(self, p: int) -> list[np.ndarray]:
        """Index groups whose data are withheld together; ``shared`` gives one empty group."""
        if self.kind == "shared":
            return [np.array([], dtype=int)]
        if self.kind == "exact":
            return [np.array([j]) for j in range(p)]
        if self.k > p:
            raise FabDomainError(f"cannot split {p} coordinates into {self.k} blocks")
        return np.array_split(np.arange(p), self.k)

    def __str__(self):
        return f"blocked:{self.k}" if self.kind == "blocked" else self.kind


@dataclass
class FabResult:
    j: int
    stat: float
    shift: float
    p_fab: float
    p_umpu: float
    mode: str
    df: float | None = None
    estimate: float | None = None
    flag: str = ""
    name: str | None = None

    def __post_init__(self):
        self.j = int(self.j)


def _block_of(blocks, p):
    owner = np.zeros(p, dtype=int)
    for i, b in enumerate(blocks):
        owner[b] = i
    return owner


def _targets(targets, p):
    if targets is None:
        return np.arange(p)
    t = np.unique(np.asarray(targets, dtype=int).ravel())
    if t.size and (t[0] < 0 or t[-1] >= p):
        raise FabDomainError(f"target indices must lie in [0, {p})")
    return t


def _is_diffuse(family):
    spec = getattr(family, "spec", family)
    return hasattr(spec, "tau2") and math.isinf(spec.tau2)


def _fixed_params(family, structure):
    """Mean coefficients of a user-supplied (not fitted) Gaussian linking model."""
    spec = family.spec
    if isinstance(spec, lk.Regression):
        return spec.beta
    return np.array([spec.mu])


def _family_name(family):
    spec = getattr(family, "spec", family)
    if isinstance(spec, str):
        return spec
    return {lk.Exchangeable: "exchangeable", lk.Regression: "regression",
            lk.CarPath: "car", lk.SpikeSlab: "spikeslab"}[type(spec)]


def _as_fixed(family):
    """Wrap a bare LinkingSpec as a FittedLinking so it can be used without fitting."""
    if isinstance(family, lk.FittedLinking) or isinstance(family, str):
        return family
    return lk.FittedLinking(spec=family, loglik=math.nan, converged=True, n_restarts_used=0)


class _Remover:
    """Representative data with given excluded directions projected out.

    With coordinate directions the projection just zeroes entries, which
    keeps the result bit-for-bit independent of the removed coordinates.
    """

    def __init__(self, y, columns):
        self.y = np.asarray(y, dtype=float)
        self.columns = columns  # p x p, column k is the direction removed for target k

    def directions(self, idx):
        return self.columns[:, idx]

    def __call__(self, idx):
        idx = np.asarray(idx, dtype=int)
        if idx.size == 0:
            return self.y.copy(), np.zeros((self.y.shape[0], 0))
        S = self.directions(idx)
        nz = S != 0
        if np.all(nz.sum(axis=0) == 1) and np.array_equal(np.argmax(nz, axis=0), idx):
            yt = self.y.copy()
            yt[idx] = 0.0
            return yt, S / np.abs(S).sum(axis=0)
        if S.shape[1] == 1:
            s = S[:, 0] / np.linalg.norm(S[:, 0])
            return self.y - s * (s @ self.y), s[:, None]
        Q, _ = np.linalg.qr(S)
        return self.y - Q @ (Q.T @ self.y), Q


def _warn_fallback(j, exc):
    warnings.warn(f"hypothesis {j}: linking fit failed ({exc}); using the UMPU shift", FallbackWarning,
                  stacklevel=3)


def _gaussian_shifts(y, cov: CovModel, family, mode: Mode, scale_fn, *, covariates=None, n_starts=3,
                     targets=None):
    """Shifts ``2 m_j scale_j / v_jj`` for the target coordinates (others stay 0).

    ``scale_fn(j, fitted)`` gives the direct standard deviation used in the
    shift (known, or built from a fitted error variance).  Returns arrays of
    shifts and flags plus the fits keyed by block.
    """
    p = cov.p
    shifts = np.zeros(p)
    flags = [""] * p
    if _is_diffuse(family):
        return shifts, flags, {}
    fixed = not isinstance(family, str)
    structure = lk.Structure(_family_name(family), cov, covariates)
    columns = np.column_stack([cov.column(j) for j in range(p)])
    remove = _Remover(y, columns)
    blocks = mode.blocks(p)
    owner = _block_of(blocks, p)
    targets = _targets(targets, p)
    fits = {}
    for bi in sorted({0} if mode.kind == "shared" else set(owner[targets].tolist())):
        block = blocks[bi]
        try:
            if fixed:
                fitted = family
                beta = _fixed_params(family, structure)
            else:
                yt, S = remove(block)
                prob = lk.make_problem(structure, yt, S)
                fitted, beta = lk.fit_problem(structure, prob, n_starts=n_starts)
            fits[bi] = (fitted, lk.TargetMoments(structure, fitted, beta))
        except (FabError, np.linalg.LinAlgError, linalg.LinAlgError) as exc:
            fits[bi] = exc
    for j in targets:
        entry = fits[owner[j]] if mode.kind != "shared" else fits[0]
        try:
            if isinstance(entry, Exception):
                raise entry
            fitted, moments = entry
            yt, S = remove([j])
            m, v = moments(j, structure.rotate(yt), structure.rotate(S[:, 0]))
            if not v > 0:
                raise ConditioningError(f"conditional variance {v} is not positive")
            b = 2.0 * m * scale_fn(j, fitted) / v
            if math.isnan(b):
                raise ConditioningError("shift is NaN")
            shifts[j] = b
        except (FabError, np.linalg.LinAlgError, linalg.LinAlgError, ZeroDivisionError) as exc:
            _warn_fallback(j, exc)
            shifts[j] = 0.0
            flags[j] = FALLBACK_FLAG
    return shifts, flags, fits


def fab_means_z(y, cov: CovModel, family="exchangeable", mode="exact", null=0.0, *, covariates=None,
                n_starts: int = 3, targets=None) -> list[FabResult]:
    """FAB p-values for ``H_j: theta_j = null_j`` from ``y ~ N(theta, Sigma)``, Sigma known.

    ``family`` is a family name to fit (``exchangeable``, ``regression``,
    ``car``) or a fixed linking spec.  ``targets`` restricts the output
    (and the work) to the listed indices.
    """
    y = np.asarray(y, dtype=float)
    if cov.kind == "correlation":
        raise FabDomainError("fab_means_z needs a fully known covariance")
    if y.shape != (cov.p,):
        raise FabDomainError("estimate vector and covariance disagree in size")
    mode = Mode.parse(mode)
    y0 = y - np.broadcast_to(np.asarray(null, dtype=float), y.shape)
    sd = np.sqrt(cov.diag())
    shifts, flags, _ = _gaussian_shifts(y0, cov, _as_fixed(family), mode, lambda j, f: sd[j],
                                        covariates=covariates, n_starts=n_starts, targets=targets)
    z = y0 / sd
    p_fab = fab_p_normal(z, shifts)
    p_umpu = fab_p_normal(z, 0.0)
    return [FabResult(j=j, stat=float(z[j]), shift=float(shifts[j]), p_fab=float(p_fab[j]),
                      p_umpu=float(p_umpu[j]), mode=str(mode), estimate=float(y[j]), flag=flags[j])
            for j in _targets(targets, cov.p)]


def fab_means_t(ybar, s2, n, X=None, null=0.0, mode="exact", *, family=None, n_starts: int = 3,
                targets=None) -> list[FabResult]:
    """FAB t p-values for group means with a leave-out Fay-Herriot linking model.

    ``X`` holds group-level covariates (an intercept-only model when None;
    include an intercept column yourself otherwise).  ``family`` may be a
    fixed ``FittedLinking`` (a ``Regression``/``Exchangeable`` spec plus
    ``sigma2``) to skip fitting.  Groups with ``n < 2`` or a non-positive
    variance are reported with flag ``invalid_group`` and NaN p-values.
    """
    ybar = np.asarray(ybar, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    n = np.asarray(n, dtype=float)
    p = ybar.shape[0]
    if s2.shape != (p,) or n.shape != (p,):
        raise FabDomainError("ybar, s2 and n must have the same length")
    X = np.ones((p, 1)) if X is None else np.asarray(X, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    null = np.broadcast_to(np.asarray(null, dtype=float), (p,))
    mode = Mode.parse(mode)
    targets = _targets(targets, p)
    valid = (n >= 2) & (s2 > 0) & np.isfinite(ybar)
    invalid_idx = np.flatnonzero(~valid)

    with np.errstate(divide="ignore", invalid="ignore"):
        t = np.sqrt(n) * (ybar - null) / np.sqrt(s2)
    df = n - 1.0

    shifts = np.zeros(p)
    flags = ["" if v else "invalid_group" for v in valid]
    if family is not None:
        family = _as_fixed(family)
    if not (family is not None and _is_diffuse(family)):
        blocks = mode.blocks(p)
        owner = _block_of(blocks, p)
        fits = {}
        for bi in sorted({0} if mode.kind == "shared" else set(owner[targets].tolist())):
            block = blocks[bi]
            if family is not None:
                fits[bi] = family
                continue
            try:
                fits[bi] = lk.fit_fay_herriot(ybar, s2, n, X, np.union1d(block, invalid_idx).astype(int),
                                              n_starts=n_starts)
            except (FabError, np.linalg.LinAlgError) as exc:
                fits[bi] = exc
        for j in targets[valid[targets]]:
            fit = fits[owner[j]]
            try:
                if isinstance(fit, Exception):
                    raise fit
                spec = fit.spec
                beta = spec.beta if isinstance(spec, lk.Regression) else np.array([spec.mu])
                m = float(X[j] @ beta) - null[j]
                shifts[j] = 2.0 * m * (math.sqrt(fit.sigma2) / math.sqrt(n[j])) / spec.tau2
            except (FabError, np.linalg.LinAlgError) as exc:
                _warn_fallback(j, exc)
                flags[j] = FALLBACK_FLAG
    out = []
    for j in targets:
        if valid[j]:
            pf = float(fab_p_symmetric(t[j], shifts[j], df=df[j]))
            pu = float(fab_p_symmetric(t[j], 0.0, df=df[j]))
        else:
            pf = pu = math.nan
        out.append(FabResult(j=j, stat=float(t[j]), shift=float(shifts[j]), p_fab=pf, p_umpu=pu,
                             mode=str(mode), df=float(df[j]), estimate=float(ybar[j]), flag=flags[j]))
    return out


@dataclass
class OlsFit:
    beta_hat: np.ndarray
    omega: np.ndarray  # covariance of beta_hat divided by sigma2
    sigma2_hat: float
    df: int


def ols(X, y, W=None) -> OlsFit:
    """OLS of ``y`` on ``[W X]``; returns the ``X`` block of estimates and of ``([W X]^T [W X])^{-1}``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    X = X[:, None] if X.ndim == 1 else X
    q = 0
    D = X
    if W is not None:
        W = np.asarray(W, dtype=float)
        W = W[:, None] if W.ndim == 1 else W
        q = W.shape[1]
        D = np.hstack([W, X]) if q else X
    nobs, k = D.shape
    if y.shape != (nobs,):
        raise FabDomainError("response length must match the design")
    if nobs <= k:
        raise FabDomainError(f"need more observations than columns (n={nobs}, columns={k})")
    rank = np.linalg.matrix_rank(D)
    if rank < k:
        from .glm import _dependent_columns
        raise RankError(f"design has rank {rank} < {k}", columns=_dependent_columns(D))
    cf = linalg.cho_factor(D.T @ D, lower=True)
    inv = linalg.cho_solve(cf, np.eye(k))
    inv = (inv + inv.T) / 2.0
    coef = inv @ (D.T @ y)
    resid = y - D @ coef
    df = nobs - k
    return OlsFit(beta_hat=coef[q:], omega=inv[q:, q:], sigma2_hat=float(resid @ resid) / df, df=df)


def fab_coefficients(beta_hat, omega, sigma2_hat, df, family="exchangeable", mode="exact", *,
                     n_starts: int = 3, names=None, targets=None) -> list[FabResult]:
    """FAB t p-values for estimates ``beta_hat ~ N(beta, sigma2 omega)``.

    ``sigma2_hat`` is independent of ``beta_hat`` with ``df`` degrees of
    freedom.  The linking fit estimates its own ``sigma2`` from the indirect
    data, so the shift never touches ``sigma2_hat``.
    """
    beta_hat = np.asarray(beta_hat, dtype=float)
    p = beta_hat.shape[0]
    mode = Mode.parse(mode)
    cov = CovModel.known_correlation(omega)
    om = np.diag(cov.matrix)
    if p >= 2:
        shifts, flags, _ = _gaussian_shifts(
            beta_hat, cov, _as_fixed(family), mode,
            lambda j, f: math.sqrt(f.sigma2 * om[j]), n_starts=n_starts, targets=targets)
    else:
        shifts, flags = np.zeros(p), [FALLBACK_FLAG] * p
    t = beta_hat / np.sqrt(om * sigma2_hat)
    p_fab = fab_p_symmetric(t, shifts, df=df)
    p_umpu = fab_p_symmetric(t, 0.0, df=df)
    return [FabResult(j=j, stat=float(t[j]), shift=float(shifts[j]), p_fab=float(np.atleast_1d(p_fab)[j]),
                      p_umpu=float(np.atleast_1d(p_umpu)[j]), mode=str(mode), df=float(df),
                      estimate=float(beta_hat[j]), flag=flags[j],
                      name=None if names is None else names[j])
            for j in _targets(targets, p)]


def fab_lm_partial(W, X, y, family="exchangeable", mode="exact", *, n_starts: int = 3, names=None,
                   targets=None) -> list[FabResult]:
    """FAB p-values for the ``X`` coefficients of ``y ~ W alpha + X beta``; ``alpha`` gets none."""
    fit = ols(X, y, W)
    return fab_coefficients(fit.beta_hat, fit.omega, fit.sigma2_hat, fit.df, family, mode,
                            n_starts=n_starts, names=names, targets=targets)


def fab_lm(X, y, family="exchangeable", mode="exact", *, n_starts: int = 3, names=None,
           targets=None) -> list[FabResult]:
    """FAB p-values for every OLS coefficient of ``y ~ X beta``."""
    return fab_lm_partial(None, X, y, family, mode, n_starts=n_starts, names=names, targets=targets)


def _spike_slab_shifts(z, v, sd, mode: Mode, targets):
    """Shifts ``2 sd_j mu / tau2`` from spike-and-slab fits to the other coordinates."""
    p = z.shape[0]
    shifts = np.zeros(p)
    flags = [""] * p
    blocks = mode.blocks(p)
    try:
        if mode.kind == "exact":
            if p < 4:
                raise FabDomainError("need at least three pseudo-observations besides the target")
            B = targets.size
            keep = np.ones((B, p), dtype=bool)
            keep[np.arange(B), targets] = False
            Z = np.broadcast_to(z, (B, p))[keep].reshape(B, p - 1)
            V = np.broadcast_to(v, (B, p))[keep].reshape(B, p - 1)
            mu, tau2, *_ = lk.fit_spike_slab_batch(Z, V)
            shifts[targets] = 2.0 * sd[targets] * mu / tau2
        else:
            for block in blocks:
                keep = np.setdiff1d(np.arange(p), block)
                if keep.size < 3:
                    raise FabDomainError("need at least three pseudo-observations outside each block")
                mu, tau2, *_ = lk.fit_spike_slab_batch(z[keep][None, :], v[keep][None, :])
                tgt = block if block.size else np.arange(p)
                shifts[tgt] = 2.0 * sd[tgt] * mu[0] / tau2[0]
    except FabError as exc:
        warnings.warn(f"spike-and-slab fit failed ({exc}); using the UMPU shift", FallbackWarning, stacklevel=2)
        return np.zeros(p), [FALLBACK_FLAG] * p
    bad = np.isnan(shifts)
    shifts[bad] = 0.0
    for j in np.flatnonzero(bad):
        flags[j] = FALLBACK_FLAG
    return shifts, flags


def fab_asymptotic(theta_hat, Sigma_hat, n, family="spikeslab", mode="exact", *, n_starts: int = 3,
                   names=None, targets=None) -> list[FabResult]:
    """Approximate FAB p-values for an asymptotically normal estimator.

    ``sqrt(n) (theta_hat - theta)`` is approximately ``N(0, Sigma)`` and
    ``Sigma_hat`` estimates ``Sigma``.  The linking model is fitted to the
    ``sqrt(n)``-scaled estimates, which makes the shift scale-equivariant.
    """
    theta_hat = np.asarray(theta_hat, dtype=float)
    Sigma_hat = np.asarray(Sigma_hat, dtype=float)
    p = theta_hat.shape[0]
    mode = Mode.parse(mode)
    d = np.diag(Sigma_hat).copy()
    if np.any(~(d > 0)):
        raise FabDomainError("Sigma_hat must have a positive diagonal")
    sd = np.sqrt(d)
    z_data = math.sqrt(n) * theta_hat
    zstat = z_data / sd
    family = _as_fixed(family)
    if _is_diffuse(family):
        shifts, flags = np.zeros(p), [""] * p
    elif _family_name(family) == "spikeslab":
        if not isinstance(family, str):
            spec = family.spec
            shifts, flags = 2.0 * sd * spec.mu / spec.tau2, [""] * p
        else:
            shifts, flags = _spike_slab_shifts(z_data, d, sd, mode, _targets(targets, p))
    else:
        cov = CovModel.estimated(Sigma_hat, n)
        shifts, flags, _ = _gaussian_shifts(z_data, cov, family, mode, lambda j, f: sd[j], n_starts=n_starts,
                                            targets=targets)
    p_fab = fab_p_normal(zstat, shifts)
    p_umpu = fab_p_normal(zstat, 0.0)
    return [FabResult(j=j, stat=float(zstat[j]), shift=float(shifts[j]), p_fab=float(p_fab[j]),
                      p_umpu=float(p_umpu[j]), mode=str(mode), estimate=float(theta_hat[j]), flag=flags[j],
                      name=None if names is None else names[j])
            for j in _targets(targets, p)]
