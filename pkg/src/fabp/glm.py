"""Logistic regression by Newton-Raphson with observed-information covariance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import linalg, special

from .exceptions import FabDomainError, RankError, SeparationError

SEPARATION_NORM = 30.0


@dataclass
class GlmFit:
    """``theta_hat`` and ``Sigma_hat = n * (X^T W X)^{-1}`` at the optimum."""

    theta_hat: np.ndarray
    Sigma_hat: np.ndarray
    n: int
    converged: bool
    iterations: int
    loglik: float
    max_score: float

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.Sigma_hat) / self.n)

    @property
    def wald_z(self) -> np.ndarray:
        return self.theta_hat / self.se


def logistic_loglik(theta, X, y) -> float:
    eta = X @ theta
    return float(y @ eta - np.logaddexp(0.0, eta).sum())


def fit_logistic(X, y, *, tol: float = 1e-10, max_iter: int = 100, max_halvings: int = 20) -> GlmFit:
    """Maximum likelihood for ``Pr(y_i = 1) = expit(x_i^T theta)``.

    Starts at zero and takes Newton steps, halving any step that lowers the
    log-likelihood.  Converged when the largest absolute score component,
    divided by ``n``, is below ``tol``.  Raises ``SeparationError`` when the
    estimate leaves the ball of radius 30 and ``RankError`` when ``X`` or
    the weighted Gram matrix is singular.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if y.shape != (n,):
        raise FabDomainError("response length must match the design")
    if not np.all((y == 0) | (y == 1)):
        raise FabDomainError("response must be binary 0/1")
    if n <= p:
        raise FabDomainError(f"need n > p, got n={n}, p={p}")
    rank = np.linalg.matrix_rank(X)
    if rank < p:
        raise RankError(f"design has rank {rank} < {p}", columns=_dependent_columns(X))

    theta = np.zeros(p)
    ll = logistic_loglik(theta, X, y)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        pi = special.expit(X @ theta)
        score = X.T @ (y - pi)
        if np.max(np.abs(score)) / n < tol:
            converged = True
            it -= 1
            break
        info = (X * (pi * (1.0 - pi))[:, None]).T @ X
        try:
            step = linalg.cho_solve(linalg.cho_factor(info), score)
        except linalg.LinAlgError as exc:
            raise RankError("weighted Gram matrix is singular") from exc
        t = 1.0
        for _ in range(max_halvings + 1):
            cand = theta + t * step
            ll_c = logistic_loglik(cand, X, y)
            if ll_c >= ll - 1e-12 * abs(ll):
                break
            t /= 2.0
        theta, ll = cand, ll_c
        if np.linalg.norm(theta) > SEPARATION_NORM:
            raise SeparationError(
                f"coefficient norm exceeded {SEPARATION_NORM}; the data look separable"
            )
    pi = special.expit(X @ theta)
    score = X.T @ (y - pi)
    info = (X * (pi * (1.0 - pi))[:, None]).T @ X
    try:
        cf = linalg.cho_factor(info)
    except linalg.LinAlgError as exc:
        raise RankError("weighted Gram matrix is singular at the estimate") from exc
    cov = linalg.cho_solve(cf, np.eye(p))
    cov = (cov + cov.T) / 2.0
    return GlmFit(
        theta_hat=theta,
        Sigma_hat=n * cov,
        n=n,
        converged=converged,
        iterations=it,
        loglik=ll,
        max_score=float(np.max(np.abs(score))),
    )


def _dependent_columns(X):
    """Columns that are linear combinations of earlier ones."""
    bad = []
    kept = []
    for k in range(X.shape[1]):
        if np.linalg.matrix_rank(X[:, kept + [k]]) <= len(kept):
            bad.append(k)
        else:
            kept.append(k)
    return bad
