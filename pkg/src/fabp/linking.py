"""Linking models ``theta ~ N(mu_gamma, Psi_gamma)`` and their marginal ML fits.

The indirect data ``G^T Y`` are Gaussian with mean ``G^T mu_gamma`` and
covariance ``G^T (Sigma + Psi_gamma) G``, so ``gamma`` is estimated by
maximizing that marginal density.  ``marginal_loglik`` evaluates it
literally.  The fitting routines work with an equivalent representation
that avoids forming ``G``: for any ``S`` spanning the excluded directions,

    G (G^T M G)^{-1} G^T = M^{-1} - M^{-1} S (S^T M^{-1} S)^{-1} S^T M^{-1}
    log det(G^T M G)     = log det M + log det(S^T M^{-1} S)      (S orthonormal)

and when ``Sigma`` and ``Psi`` share an eigenbasis ``M`` is diagonal after
a fixed rotation, so each likelihood evaluation is O(p).  Mean
coefficients are profiled out by generalized least squares.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import fft, linalg, optimize, special

from .exceptions import FabDomainError, FitError, RankError
from .indirect import Basis, CovModel

FAMILIES = ("exchangeable", "regression", "car", "spikeslab")

_LOG_2PI = math.log(2.0 * math.pi)
VARIANCE_FLOOR = 1e-8


# ---------------------------------------------------------------------------
# linking specifications


@dataclass(frozen=True)
class Exchangeable:
    mu: float
    tau2: float

    def __post_init__(self):
        _check_tau2(self.tau2)


@dataclass(frozen=True)
class Regression:
    X: np.ndarray = field(repr=False)
    beta: np.ndarray
    tau2: float

    def __post_init__(self):
        _check_tau2(self.tau2)
        X = np.atleast_2d(np.asarray(self.X, dtype=float))
        beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        if X.shape[1] != beta.shape[0]:
            raise FabDomainError("covariate matrix and coefficient vector disagree in length")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "beta", beta)


@dataclass(frozen=True)
class CarPath:
    """Conditional autoregression on a path: ``theta_j | rest ~ N(beta0 + beta1 (theta_{j-1} + theta_{j+1}), tau2)``.

    The joint law is ``N(mu 1, tau2 (I - beta1 A)^{-1})`` with ``A`` the path
    adjacency, so the interior intercept is ``beta0 = mu (1 - 2 beta1)``.
    """

    mu: float
    beta1: float
    tau2: float

    def __post_init__(self):
        _check_tau2(self.tau2)
        if not abs(self.beta1) < 0.5:
            raise FabDomainError(f"CAR path needs |beta1| < 1/2, got {self.beta1}")

    @property
    def beta0(self) -> float:
        return self.mu * (1.0 - 2.0 * self.beta1)


@dataclass(frozen=True)
class SpikeSlab:
    """Mixture ``w N(mu, tau2) + (1 - w) delta_0``.  Only the slab enters the test."""

    mu: float
    tau2: float
    w: float

    def __post_init__(self):
        _check_tau2(self.tau2)
        if not 0.0 < self.w <= 1.0:
            raise FabDomainError(f"slab weight must lie in (0, 1], got {self.w}")


LinkingSpec = Exchangeable | Regression | CarPath | SpikeSlab


def _check_tau2(tau2):
    if not tau2 > 0:
        raise FabDomainError(f"tau2 must be positive, got {tau2}")


@dataclass
class FittedLinking:
    """Result of a marginal maximum-likelihood fit."""

    spec: LinkingSpec
    loglik: float
    converged: bool
    n_restarts_used: int
    sigma2: float = 1.0
    at_floor: bool = False
    diagnostics: dict = field(default_factory=dict, repr=False)

    @property
    def gamma(self) -> dict:
        g = {k: v for k, v in vars(self.spec).items() if k != "X"}
        g["sigma2"] = self.sigma2
        return g


def path_adjacency(p: int) -> np.ndarray:
    A = np.zeros((p, p))
    i = np.arange(p - 1)
    A[i, i + 1] = 1.0
    A[i + 1, i] = 1.0
    return A


def path_eigenvalues(p: int) -> np.ndarray:
    """Eigenvalues of the path adjacency, in the order matching the DST-I basis."""
    return 2.0 * np.cos(np.pi * np.arange(1, p + 1) / (p + 1))


def linking_moments(spec: LinkingSpec, p: int | None = None):
    """Mean vector and covariance matrix implied by a linking specification."""
    if isinstance(spec, Regression):
        n = spec.X.shape[0]
        if p is not None and p != n:
            raise FabDomainError("p does not match the covariate matrix")
        return spec.X @ spec.beta, spec.tau2 * np.eye(n)
    if p is None:
        raise FabDomainError("p is required for this linking family")
    if isinstance(spec, (Exchangeable, SpikeSlab)):
        return np.full(p, float(spec.mu)), spec.tau2 * np.eye(p)
    if isinstance(spec, CarPath):
        Q = np.eye(p) - spec.beta1 * path_adjacency(p)
        Psi = spec.tau2 * np.linalg.inv(Q)
        return np.full(p, float(spec.mu)), (Psi + Psi.T) / 2.0
    raise FabDomainError(f"unknown linking spec {spec!r}")


def marginal_loglik(spec: LinkingSpec, x, basis: Basis, cov: CovModel, sigma2: float = 1.0) -> float:
    """Log-density of ``x = G^T y`` under ``N(G^T mu, G^T (Sigma + Psi) G)``.

    Returns ``-inf`` when the covariance is not positive definite.
    """
    x = np.asarray(x, dtype=float)
    mu, Psi = linking_moments(spec, basis.p)
    G = basis.G
    C = G.T @ (cov.dense(sigma2) + Psi) @ G
    try:
        L = np.linalg.cholesky(C)
    except np.linalg.LinAlgError:
        return -math.inf
    r = linalg.solve_triangular(L, x - G.T @ mu, lower=True)
    k = x.shape[0]
    return float(-0.5 * (k * _LOG_2PI + 2.0 * np.log(np.diag(L)).sum() + r @ r))


# ---------------------------------------------------------------------------
# structured likelihood engine


class _SpectralFactor:
    def __init__(self, d, psi):
        self.d = d
        self.psi = psi
        self.logdet = float(np.log(d).sum())

    def solve(self, v):
        return v / self.d if v.ndim == 1 else v / self.d[:, None]

    def psi_apply(self, v):
        return self.psi * v if v.ndim == 1 else self.psi[:, None] * v


class _DenseFactor:
    def __init__(self, M, Psi):
        self.cf = linalg.cho_factor(M, lower=True)
        self.Psi = Psi
        self.logdet = float(2.0 * np.log(np.diag(self.cf[0])).sum())

    def solve(self, v):
        return linalg.cho_solve(self.cf, v)

    def psi_apply(self, v):
        return self.Psi @ v


class Structure:
    """Covariance structure of a family/covariance pair, fixed across fits.

    ``kind`` is ``"diag"`` (no rotation needed), ``"eigen"`` (rotate by the
    eigenvectors of the sampling covariance; linking covariance is
    ``tau2 I``), ``"dst"`` (CAR path with scalar sampling covariance;
    rotate by the sine transform) or ``"dense"`` (Cholesky per evaluation).
    """

    def __init__(self, family: str, cov: CovModel, covariates=None):
        if family not in ("exchangeable", "regression", "car"):
            raise FabDomainError(f"family {family!r} has no Gaussian marginal likelihood")
        self.family = family
        self.cov = cov
        self.p = p = cov.p
        if family == "regression":
            if covariates is None:
                raise FabDomainError("regression linking needs covariates")
            X = np.asarray(covariates, dtype=float)
            X = X[:, None] if X.ndim == 1 else X
            if X.shape[0] != p:
                raise FabDomainError("covariates must have one row per coordinate")
        else:
            X = np.ones((p, 1))
        self.X = X
        self.scale_known = cov.scale_known
        diag = cov.diag()
        if family == "car":
            self.adj_eig = None
            off = cov.dense() - np.diag(diag) if cov.kind != "diagonal" else None
            scalar = np.all(diag == diag[0]) and (off is None or not np.any(off))
            if scalar:
                self.kind = "dst"
                self.noise = diag.copy()
                self.adj_eig = path_eigenvalues(p)
            else:
                self.kind = "dense"
                self.sigma0 = cov.dense()
                self.adj = path_adjacency(p)
        elif cov.kind == "diagonal":
            self.kind = "diag"
            self.noise = diag.copy()
        else:
            self.kind = "eigen"
            lam, U = np.linalg.eigh(cov.dense())
            if not np.all(lam > 0):
                raise FabDomainError("sampling covariance is not positive definite")
            self.noise = lam
            self.U = U
        self.Xr = self.rotate(X)

    # rotations -------------------------------------------------------
    def rotate(self, v):
        v = np.asarray(v, dtype=float)
        if self.kind == "eigen":
            return self.U.T @ v
        if self.kind == "dst":
            return fft.dst(v, type=1, norm="ortho", axis=0)
        return v

    def unit(self, j):
        """Rotated coordinate vector ``e_j``."""
        if self.kind == "eigen":
            return self.U[j, :].copy()
        e = np.zeros(self.p)
        e[j] = 1.0
        return self.rotate(e)

    # parameters --------------------------------------------------------
    @property
    def n_var_params(self):
        return 1 + (self.family == "car") + (not self.scale_known)

    def decode(self, eta, floor_tau2, floor_sigma2):
        eta = np.clip(np.asarray(eta, dtype=float), -700.0, 700.0)
        tau2 = max(math.exp(eta[0]), floor_tau2)
        i = 1
        beta1 = 0.0
        if self.family == "car":
            # keep |beta1| strictly below 1/2 after rounding
            beta1 = 0.5 * math.tanh(min(max(eta[i], -15.0), 15.0))
            i += 1
        sigma2 = 1.0
        if not self.scale_known:
            sigma2 = max(math.exp(eta[i]), floor_sigma2)
        return tau2, beta1, sigma2

    def encode(self, tau2, beta1=0.0, sigma2=1.0):
        eta = [math.log(tau2)]
        if self.family == "car":
            eta.append(math.atanh(2.0 * beta1))
        if not self.scale_known:
            eta.append(math.log(sigma2))
        return np.array(eta)

    def factor(self, tau2, beta1, sigma2):
        if self.kind == "dense":
            if self.family == "car":
                Psi = tau2 * np.linalg.inv(np.eye(self.p) - beta1 * self.adj)
                Psi = (Psi + Psi.T) / 2.0
            else:
                Psi = tau2 * np.eye(self.p)
            return _DenseFactor(sigma2 * self.sigma0 + Psi, Psi)
        if self.family == "car":
            psi = tau2 / (1.0 - beta1 * self.adj_eig)
        else:
            psi = np.full(self.p, tau2)
        return _SpectralFactor(sigma2 * self.noise + psi, psi)

    def make_spec(self, beta, tau2, beta1):
        if self.family == "exchangeable":
            return Exchangeable(mu=float(beta[0]), tau2=tau2)
        if self.family == "car":
            return CarPath(mu=float(beta[0]), beta1=beta1, tau2=tau2)
        return Regression(X=self.X, beta=beta, tau2=tau2)


def _orthonormal_columns(S):
    S = np.asarray(S, dtype=float)
    if S.ndim == 1:
        S = S[:, None]
    if S.shape[1] == 0:
        return S
    if S.shape[1] == 1:
        return S / np.linalg.norm(S)
    Q, _ = np.linalg.qr(S)
    return Q


@dataclass
class _Problem:
    """Rotated data for one fit: representative data, mean design, excluded directions."""

    y: np.ndarray
    X: np.ndarray
    S: np.ndarray
    k: int  # dimension of the indirect data


def _profile(factor, prob: _Problem):
    """Profile log-likelihood (mean coefficients at their GLS value)."""
    Ky = factor.solve(prob.y)
    KX = factor.solve(prob.X)
    yKy = prob.y @ Ky
    XKy = prob.X.T @ Ky
    XKX = prob.X.T @ KX
    logdet = factor.logdet
    if prob.S.shape[1]:
        KS = factor.solve(prob.S)
        A = prob.S.T @ KS
        cA = linalg.cho_factor(A, lower=True)
        SKy = KS.T @ prob.y
        SKX = KS.T @ prob.X
        yKy = yKy - SKy @ linalg.cho_solve(cA, SKy)
        XKy = XKy - SKX.T @ linalg.cho_solve(cA, SKy)
        XKX = XKX - SKX.T @ linalg.cho_solve(cA, SKX)
        logdet += 2.0 * np.log(np.diag(cA[0])).sum()
    cX = linalg.cho_factor(XKX, lower=True)
    beta = linalg.cho_solve(cX, XKy)
    quad = yKy - XKy @ beta
    return -0.5 * (prob.k * _LOG_2PI + logdet + quad), beta


def make_problem(structure: Structure, ytilde, S) -> _Problem:
    S = _orthonormal_columns(np.zeros((structure.p, 0)) if S is None else S)
    return _Problem(
        y=structure.rotate(ytilde),
        X=structure.Xr,
        S=structure.rotate(S) if S.shape[1] else S,
        k=structure.p - S.shape[1],
    )


def _starts(structure: Structure, prob: _Problem, n_starts: int):
    v = float(np.var(prob.y)) * prob.y.shape[0] / max(prob.k, 1)
    v = v if v > 0 else 1.0
    nbar = float(np.mean(structure.noise if structure.kind != "dense" else np.diag(structure.sigma0)))
    if structure.scale_known:
        s_mom = s_dif = s_shr = 1.0
        t_mom = max(v - nbar, 0.1 * v)
    else:
        s_mom, s_dif, s_shr = v / (2.0 * nbar), v / (2.0 * nbar), v / nbar
        t_mom = v / 2.0
    starts = [
        structure.encode(t_mom, 0.0, s_mom),
        structure.encode(10.0 * v, 0.0, s_dif),
        structure.encode(0.01 * v, 0.25, s_shr),
    ]
    return starts[: max(1, n_starts)]


def fit_problem(structure: Structure, prob: _Problem, *, n_starts: int = 3, fatol: float = 1e-9,
                xatol: float = 1e-7, maxiter: int | None = None) -> tuple[FittedLinking, np.ndarray]:
    """Marginal ML over the variance parameters by multi-start Nelder-Mead."""
    if prob.k < structure.X.shape[1] + structure.n_var_params:
        raise FitError("too few indirect observations for the linking parameters")
    scale2 = float(prob.y @ prob.y) / prob.k
    scale2 = scale2 if scale2 > 0 else 1.0
    nbar = float(np.mean(structure.noise if structure.kind != "dense" else np.diag(structure.sigma0)))
    floor_tau2 = VARIANCE_FLOOR * scale2
    floor_sigma2 = VARIANCE_FLOOR * scale2 / nbar

    def negll(eta):
        tau2, beta1, sigma2 = structure.decode(eta, floor_tau2, floor_sigma2)
        try:
            ll, _ = _profile(structure.factor(tau2, beta1, sigma2), prob)
        except (linalg.LinAlgError, np.linalg.LinAlgError, ValueError):
            return math.inf
        return -ll if math.isfinite(ll) else math.inf

    dim = structure.n_var_params
    best = None
    runs = []
    for x0 in _starts(structure, prob, n_starts):
        f0 = negll(x0)
        if not math.isfinite(f0):
            runs.append({"start": x0, "status": "infeasible start"})
            continue
        simplex = np.vstack([x0] + [x0 + 0.5 * np.eye(dim)[i] for i in range(dim)])
        res = optimize.minimize(
            negll, x0, method="Nelder-Mead",
            options={"initial_simplex": simplex, "fatol": fatol, "xatol": xatol,
                     "maxiter": maxiter or 400 * dim, "maxfev": maxiter or 600 * dim},
        )
        runs.append({"start": x0, "x": res.x, "fun": res.fun, "success": res.success, "nfev": res.nfev})
        if math.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise FitError("no feasible start for the marginal likelihood", {"runs": runs})
    tau2, beta1, sigma2 = structure.decode(best.x, floor_tau2, floor_sigma2)
    ll, beta = _profile(structure.factor(tau2, beta1, sigma2), prob)
    fitted = FittedLinking(
        spec=structure.make_spec(beta, tau2, beta1),
        loglik=float(ll),
        converged=any(r.get("success", False) for r in runs),
        n_restarts_used=len(runs),
        sigma2=sigma2,
        at_floor=tau2 <= floor_tau2 * (1.0 + 1e-9),
        diagnostics={"runs": runs},
    )
    return fitted, beta


def _variance_params(fitted: FittedLinking):
    spec = fitted.spec
    return spec.tau2, getattr(spec, "beta1", 0.0), fitted.sigma2


def profile_loglik_at(structure: Structure, prob: _Problem, tau2, beta1=0.0, sigma2=1.0):
    """Profile log-likelihood at given variance parameters; returns (loglik, beta)."""
    ll, beta = _profile(structure.factor(tau2, beta1, sigma2), prob)
    return float(ll), beta


class TargetMoments:
    """Conditional moments of ``theta_j`` given indirect data for a fixed fit."""

    def __init__(self, structure: Structure, fitted: FittedLinking, beta):
        self.structure = structure
        self.beta = np.asarray(beta, dtype=float)
        self.factor = structure.factor(*_variance_params(fitted))
        self.mean = structure.X @ self.beta
        self.mean_r = structure.Xr @ self.beta

    def __call__(self, j: int, y_rot, s_rot):
        """``(m_j, v_jj)`` given rotated representative data and excluded direction."""
        f = self.factor
        e = self.structure.unit(j)
        psi_j = f.psi_apply(e)
        r = y_rot - self.mean_r
        Kpsi = f.solve(psi_j)
        Ks = f.solve(s_rot)
        sKs = s_rot @ Ks
        a_s = psi_j @ Ks
        m = self.mean[j] + psi_j @ f.solve(r) - a_s * (Ks @ r) / sKs
        v = e @ psi_j - psi_j @ Kpsi + a_s * a_s / sKs
        return float(m), float(v)


def fit_marginal_ml(family: str, x, basis: Basis | None, cov: CovModel, *, covariates=None,
                    n_starts: int = 3) -> FittedLinking:
    """Marginal ML estimate of the linking parameters from indirect data ``x = G^T y``.

    ``basis=None`` means the data are the full vector ``y`` (no exclusion).
    """
    structure = Structure(family, cov, covariates)
    if basis is None:
        ytilde, S = np.asarray(x, dtype=float), None
    else:
        ytilde, S = basis.G @ np.asarray(x, dtype=float), basis.excluded
    fitted, _ = fit_problem(structure, make_problem(structure, ytilde, S), n_starts=n_starts)
    return fitted


# ---------------------------------------------------------------------------
# Fay-Herriot


def _fh_loglik(ybar, s2, n, X, sigma2, tau2):
    d = sigma2 / n + tau2
    w = 1.0 / d
    XtW = X.T * w
    beta = np.linalg.solve(XtW @ X, XtW @ ybar)
    r = ybar - X @ beta
    ll = -0.5 * (len(ybar) * _LOG_2PI + np.log(d).sum() + (w * r * r).sum())
    nu = n - 1.0
    # (n-1) s2 / sigma2 ~ chi2_{n-1}, density of s2 by change of variables
    q = nu * s2 / sigma2
    ll_s = ((nu / 2.0 - 1.0) * np.log(q) - q / 2.0 - (nu / 2.0) * math.log(2.0)
            - special.gammaln(nu / 2.0) + np.log(nu / sigma2))
    return float(ll + ll_s.sum()), beta


def fit_fay_herriot(ybar, s2, n, X=None, exclude=None, *, tau2=None, n_starts: int = 3) -> FittedLinking:
    """Joint ML fit of the Fay-Herriot model with a common within-group variance.

    ``ybar_k ~ N(x_k^T beta, sigma2 / n_k + tau2)`` and
    ``(n_k - 1) s2_k / sigma2 ~ chi2_{n_k - 1}`` for every group ``k`` not in
    ``exclude`` (an index or collection of indices).  ``tau2`` may be fixed.
    The returned spec is a ``Regression`` over all groups.
    """
    ybar = np.asarray(ybar, dtype=float)
    s2 = np.asarray(s2, dtype=float)
    n = np.asarray(n, dtype=float)
    p = ybar.shape[0]
    X_all = np.ones((p, 1)) if X is None else np.asarray(X, dtype=float)
    X_all = X_all[:, None] if X_all.ndim == 1 else X_all
    keep = np.ones(p, dtype=bool)
    if exclude is not None:
        keep[np.atleast_1d(exclude)] = False
    if np.any(n[keep] < 2):
        raise FabDomainError("every group in the fit needs n >= 2")
    if np.any(~(s2[keep] > 0)):
        raise FabDomainError("group variances must be positive")
    yk, sk, nk, Xk = ybar[keep], s2[keep], n[keep], X_all[keep]
    q = Xk.shape[1]
    if np.linalg.matrix_rank(Xk) < q:
        raise RankError("Fay-Herriot covariates are rank deficient", columns=range(q))
    if yk.shape[0] < q + 2:
        raise FitError("too few groups for the Fay-Herriot fit")

    pooled = float(((nk - 1) * sk).sum() / (nk - 1).sum())
    resid = yk - Xk @ np.linalg.lstsq(Xk, yk, rcond=None)[0]
    vres = float(resid @ resid / max(len(yk) - q, 1))
    scale2 = max(vres, pooled / float(np.mean(nk)))
    floor_tau2 = VARIANCE_FLOOR * scale2
    floor_s2 = VARIANCE_FLOOR * pooled

    def decode(eta):
        eta = np.clip(eta, -700.0, 700.0)
        s = max(math.exp(eta[0]), floor_s2)
        t = tau2 if tau2 is not None else max(math.exp(eta[1]), floor_tau2)
        return s, t

    def negll(eta):
        s, t = decode(eta)
        try:
            ll, _ = _fh_loglik(yk, sk, nk, Xk, s, t)
        except np.linalg.LinAlgError:
            return math.inf
        return -ll if math.isfinite(ll) else math.inf

    t_mom = max(vres - pooled * float(np.mean(1.0 / nk)), 0.1 * vres)
    starts = [(pooled, t_mom), (pooled, 10.0 * vres), (pooled, 0.01 * vres)][: max(1, n_starts)]
    best, runs = None, []
    for s0, t0 in starts:
        x0 = np.array([math.log(s0)] if tau2 is not None else [math.log(s0), math.log(t0)])
        dim = x0.shape[0]
        simplex = np.vstack([x0] + [x0 + 0.5 * np.eye(dim)[i] for i in range(dim)])
        res = optimize.minimize(negll, x0, method="Nelder-Mead",
                                options={"initial_simplex": simplex, "fatol": 1e-9, "xatol": 1e-7,
                                         "maxiter": 400 * dim, "maxfev": 600 * dim})
        runs.append({"start": x0, "x": res.x, "fun": res.fun, "success": res.success})
        if math.isfinite(res.fun) and (best is None or res.fun < best.fun):
            best = res
        if tau2 is not None:
            break
    if best is None:
        raise FitError("Fay-Herriot likelihood infeasible at every start", {"runs": runs})
    s, t = decode(best.x)
    ll, beta = _fh_loglik(yk, sk, nk, Xk, s, t)
    return FittedLinking(
        spec=Regression(X=X_all, beta=beta, tau2=t if t > 0 else floor_tau2),
        loglik=ll,
        converged=any(r["success"] for r in runs),
        n_restarts_used=len(runs),
        sigma2=s,
        at_floor=tau2 is None and t <= floor_tau2 * (1.0 + 1e-9),
        diagnostics={"runs": runs},
    )


# ---------------------------------------------------------------------------
# spike and slab


def _ss_loglik(z, v, mu, tau2, w):
    """Row log-likelihoods and slab responsibilities of the spike-and-slab marginal."""
    t = tau2[:, None] + v
    slab = np.log(w)[:, None] - 0.5 * (_LOG_2PI + np.log(t) + (z - mu[:, None]) ** 2 / t)
    spike = np.log1p(-np.minimum(w, 1.0 - 1e-16))[:, None] - 0.5 * (_LOG_2PI + np.log(v) + z * z / v)
    tot = np.logaddexp(slab, spike)
    return tot.sum(axis=1), np.exp(slab - tot)


def _ss_q(z, v, r, mu, tau2):
    t = tau2[:, None] + v
    return -0.5 * (r * (np.log(t) + (z - mu[:, None]) ** 2 / t)).sum(axis=1)


def _ss_em_step(z, v, mu, tau2, w, floor, n_bisect=40):
    """One ECM update with the component label as the only latent variable.

    ``w`` has a closed form, ``mu`` is the weighted mean at the current
    ``tau2``, and ``tau2`` then maximizes the expected complete-data
    log-likelihood on ``[floor, max (z - mu)^2]`` by bisection on its
    derivative.  A ``tau2`` that would lower that objective is rejected, so
    every step is monotone.
    """
    _, r = _ss_loglik(z, v, mu, tau2, w)
    rs = r.sum(axis=1)
    new_w = np.clip(rs / z.shape[1], 1e-12, 1.0)
    ok = rs > 1e-300
    prec = r / (tau2[:, None] + v)
    ps = prec.sum(axis=1)
    new_mu = np.where(ok & (ps > 0), (prec * z).sum(axis=1) / np.where(ps > 0, ps, 1.0), mu)
    d2 = (z - new_mu[:, None]) ** 2
    lo = np.log(floor)
    hi = np.log(np.maximum(np.max(d2, axis=1), floor * 2.0))

    def slope(lt):
        t = np.exp(lt)[:, None] + v
        return (r * (d2 - t) / (t * t)).sum(axis=1)

    at_floor = slope(lo) <= 0.0
    for _ in range(n_bisect):
        mid = 0.5 * (lo + hi)
        up = slope(mid) > 0.0
        lo = np.where(up, mid, lo)
        hi = np.where(up, hi, mid)
    cand = np.where(at_floor, floor, np.exp(0.5 * (lo + hi)))
    better = _ss_q(z, v, r, new_mu, cand) >= _ss_q(z, v, r, new_mu, tau2)
    new_tau2 = np.where(ok & better, cand, tau2)
    return new_mu, np.maximum(new_tau2, floor), new_w


def _ss_pack(mu, tau2, w):
    return np.column_stack([mu, np.log(tau2), np.log(w) - np.log1p(-np.minimum(w, 1.0 - 1e-16))])


def _ss_unpack(x, floor):
    tau2 = np.maximum(np.exp(np.clip(x[:, 1], -700.0, 700.0)), floor)
    return x[:, 0], tau2, np.clip(special.expit(x[:, 2]), 1e-12, 1.0)


def spike_slab_em(z, v, mu0, tau20, w0, *, max_iter: int = 2000, tol: float = 1e-10, floor=None):
    """Batched EM for ``w N(mu, tau2 + v_k) + (1 - w) N(0, v_k)``.

    ``z`` and ``v`` are (B, m) arrays of pseudo-observations and their known
    variances; each row is an independent problem.  The latent variable is
    the component label; the M-step is done by conditional maximization
    (see ``_ss_em_step``).  Augmenting the slab draw as well gives a closed
    form M-step but converges sublinearly when the slab variance goes to
    zero, which is common.  Each iteration is a SQUAREM extrapolation over
    two such steps, kept only when it beats them, so the likelihood never
    decreases.  Returns ``(mu, tau2, w, loglik, iters, converged)``.
    """
    z = np.atleast_2d(np.asarray(z, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    B = z.shape[0]
    mu = np.broadcast_to(np.asarray(mu0, dtype=float), (B,)).copy()
    tau2 = np.broadcast_to(np.asarray(tau20, dtype=float), (B,)).copy()
    w = np.broadcast_to(np.asarray(w0, dtype=float), (B,)).copy()
    if floor is None:
        floor = VARIANCE_FLOOR * np.maximum(np.mean(z * z, axis=1), np.mean(v, axis=1))
    floor = np.broadcast_to(np.asarray(floor, dtype=float), (B,)).copy()
    tau2 = np.maximum(tau2, floor)
    w = np.clip(w, 1e-12, 1.0)

    def step(za, va, fa, p):
        """ECM step followed by a jump to w = 1 when that is better (w -> 1 is sublinear)."""
        new = _ss_em_step(za, va, *p, fa)
        ll_new, _ = _ss_loglik(za, va, *new)
        ll_one, _ = _ss_loglik(za, va, new[0], new[1], np.ones(za.shape[0]))
        snap = ll_one > ll_new
        return (new[0], new[1], np.where(snap, 1.0, new[2])), np.where(snap, ll_one, ll_new)

    ll, _ = _ss_loglik(z, v, mu, tau2, w)
    active = np.ones(B, dtype=bool)
    iters = np.zeros(B, dtype=int)
    for _ in range(max_iter):
        if not active.any():
            break
        a = np.flatnonzero(active)
        za, va, fa = z[a], v[a], floor[a]
        p0 = (mu[a], tau2[a], w[a])
        p1, _ = step(za, va, fa, p0)
        p2, ll2 = step(za, va, fa, p1)
        # the floor and the clip on w are projections; allow their rounding
        if np.any(ll2 < ll[a] - 1e-8 * np.maximum(1.0, np.abs(ll[a]))):
            raise FitError("EM step decreased the spike-and-slab likelihood", {"before": ll[a], "after": ll2})
        # SQUAREM extrapolation, kept only when it beats two plain steps
        x0, x1, x2 = _ss_pack(*p0), _ss_pack(*p1), _ss_pack(*p2)
        r = x1 - x0
        d = x2 - 2.0 * x1 + x0
        rn = np.sqrt((r * r).sum(axis=1))
        dn = np.sqrt((d * d).sum(axis=1))
        alpha = np.minimum(-rn / np.where(dn > 0, dn, np.inf), -1.0)[:, None]
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            xs = x0 - 2.0 * alpha * r + alpha * alpha * d
            ok = np.all(np.isfinite(xs), axis=1)
            xs = np.where(ok[:, None], xs, x2)
            ps, lls = step(za, va, fa, _ss_unpack(xs, fa))
        use = ok & np.isfinite(lls) & (lls > ll2)
        new = [np.where(use, s_, t_) for s_, t_ in zip(ps, p2)]
        new_ll = np.where(use, lls, ll2)
        gain = new_ll - ll[a]
        mu[a], tau2[a], w[a] = new
        ll[a] = new_ll
        iters[a] += 1
        done = gain <= tol * (1.0 + np.abs(new_ll))
        active[a[done]] = False
    return mu, tau2, w, ll, iters, ~active


def _spike_slab_starts(z):
    z = np.atleast_2d(z)
    absz = np.abs(z)
    med = np.median(absz, axis=1, keepdims=True)
    big = absz >= med
    mu_all = z.mean(axis=1)
    mu_big = (z * big).sum(axis=1) / big.sum(axis=1)
    var = np.maximum(z.var(axis=1), 1e-12)
    return [(mu_all, var, 0.5), (mu_big, 0.25 * var, 0.5)]


def fit_spike_slab_batch(z, v, **kw):
    """Best-of-starts EM fits for each row of ``z`` (B, m) with variances ``v``."""
    z = np.atleast_2d(np.asarray(z, dtype=float))
    v = np.atleast_2d(np.asarray(v, dtype=float))
    best = None
    for mu0, t0, w0 in _spike_slab_starts(z):
        res = spike_slab_em(z, v, mu0, t0, w0, **kw)
        if best is None:
            best = [np.array(a, copy=True) for a in res]
        else:
            better = res[3] > best[3]
            for k in range(6):
                best[k] = np.where(better, res[k], best[k])
    return tuple(best)


def fit_spike_slab(theta_indirect, scales, **kw) -> FittedLinking:
    """EM fit of the spike-and-slab marginal for independent pseudo-observations.

    ``scales`` are the standard errors of the pseudo-observations.
    """
    z = np.asarray(theta_indirect, dtype=float)
    s = np.asarray(scales, dtype=float)
    if z.ndim != 1 or z.shape[0] < 3:
        raise FabDomainError("need at least three pseudo-observations")
    if z.shape != s.shape or not np.all(s > 0):
        raise FabDomainError("scales must be positive and match the observations")
    mu, tau2, w, ll, iters, conv = fit_spike_slab_batch(z[None, :], (s * s)[None, :], **kw)
    floor = VARIANCE_FLOOR * max(float(np.mean(z * z)), float(np.mean(s * s)))
    return FittedLinking(
        spec=SpikeSlab(mu=float(mu[0]), tau2=float(tau2[0]), w=float(w[0])),
        loglik=float(ll[0]),
        converged=bool(conv[0]),
        n_restarts_used=2,
        at_floor=bool(tau2[0] <= floor * (1.0 + 1e-9)),
        diagnostics={"iterations": int(iters[0])},
    )
