"""Indirect information: null-space bases and Gaussian conditional moments.

For a target coordinate ``j`` the indirect data are ``G^T Y`` where the
columns of ``G`` span the orthogonal complement of the ``j``-th column of
the sampling covariance.  ``G^T Y`` is then independent of ``Y_j`` and,
through a Gaussian linking model ``theta ~ N(mu, Psi)``, informative about
``theta_j``.

Indices are zero-based throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .exceptions import ConditioningError, DegenerateTargetError, FabDomainError


@dataclass(frozen=True)
class CovModel:
    """What is known about the covariance of the estimate vector.

    ``kind`` is one of ``"diagonal"`` (known variances), ``"full"`` (known
    matrix), ``"correlation"`` (``sigma2 * omega`` with ``sigma2`` unknown)
    or ``"estimated"`` (a consistent estimate from a sample of size ``n``,
    treated as known).
    """

    kind: str
    matrix: np.ndarray
    n: int | None = None

    def __post_init__(self):
        if self.kind not in ("diagonal", "full", "correlation", "estimated"):
            raise FabDomainError(f"unknown covariance kind {self.kind!r}")
        m = np.asarray(self.matrix, dtype=float)
        if self.kind == "diagonal":
            if m.ndim != 1:
                raise FabDomainError("diagonal covariance expects a vector of variances")
            if not np.all(m > 0):
                raise FabDomainError("variances must be strictly positive")
        else:
            if m.ndim != 2 or m.shape[0] != m.shape[1]:
                raise FabDomainError("covariance must be a square matrix")
            if not np.allclose(m, m.T, rtol=1e-10, atol=1e-14 * np.abs(m).max()):
                raise FabDomainError("covariance must be symmetric")
            if not np.all(np.diag(m) > 0):
                raise FabDomainError("covariance diagonal must be strictly positive")
            m = (m + m.T) / 2.0
        object.__setattr__(self, "matrix", m)

    @classmethod
    def diagonal(cls, variances):
        return cls("diagonal", np.asarray(variances, dtype=float))

    @classmethod
    def full(cls, sigma):
        return cls("full", np.asarray(sigma, dtype=float))

    @classmethod
    def known_correlation(cls, omega):
        return cls("correlation", np.asarray(omega, dtype=float))

    @classmethod
    def estimated(cls, sigma_hat, n):
        return cls("estimated", np.asarray(sigma_hat, dtype=float), int(n))

    @property
    def p(self) -> int:
        return self.matrix.shape[0]

    @property
    def scale_known(self) -> bool:
        return self.kind != "correlation"

    def dense(self, sigma2: float = 1.0) -> np.ndarray:
        """The covariance as a p x p matrix (times ``sigma2``)."""
        if self.kind == "diagonal":
            return sigma2 * np.diag(self.matrix)
        return sigma2 * self.matrix

    def diag(self) -> np.ndarray:
        return self.matrix.copy() if self.kind == "diagonal" else np.diag(self.matrix).copy()

    def column(self, j: int) -> np.ndarray:
        """Column ``j`` of the (unit-scale) covariance."""
        if self.kind == "diagonal":
            col = np.zeros(self.p)
            col[j] = self.matrix[j]
            return col
        return self.matrix[:, j].copy()


@dataclass(frozen=True)
class Basis:
    """Orthonormal basis ``G`` of the complement of ``excluded``.

    ``excluded`` is a p x m matrix with orthonormal columns spanning the
    directions removed from the data (m = 1 for a single target).
    """

    G: np.ndarray
    j: int
    excluded: np.ndarray = field(repr=False)

    @property
    def p(self) -> int:
        return self.G.shape[0]

    def project(self, y) -> np.ndarray:
        """Indirect data ``G^T y``."""
        return self.G.T @ np.asarray(y, dtype=float)


@dataclass(frozen=True)
class IndirectMoments:
    """Conditional law ``theta_j | G^T Y ~ N(m_j, v_jj)`` and the implied shift."""

    m_j: float
    v_jj: float
    b: float
    m: np.ndarray = field(repr=False)
    V: np.ndarray = field(repr=False)


def _check_index(p, j):
    if p < 2:
        raise FabDomainError(f"need at least two coordinates, got p={p}")
    if not 0 <= j < p:
        raise FabDomainError(f"index {j} out of range for p={p}")


def delete_column_basis(p: int, j: int) -> Basis:
    """The p x p identity with column ``j`` removed (valid for diagonal covariance)."""
    _check_index(p, j)
    eye = np.eye(p)
    return Basis(G=np.delete(eye, j, axis=1), j=j, excluded=eye[:, [j]])


def gram_schmidt_nullspace(s, j: int) -> Basis:
    """Orthonormal basis of the null space of ``s``.

    Orthonormalizes ``s, e_0, ..., e_{p-1}`` (skipping ``e_j``) in that order
    and drops the first vector.  Each vector keeps a positive coefficient on
    its own generator, which makes the map continuous in ``s`` wherever
    ``s[j] != 0``.  Computed as a QR factorization with positive diagonal,
    which is the same basis with better rounding behaviour.
    """
    s = np.asarray(s, dtype=float)
    p = s.shape[0]
    _check_index(p, j)
    norm = np.linalg.norm(s)
    if not norm > 0 or not np.isfinite(norm):
        raise DegenerateTargetError("null-space vector must be nonzero and finite")
    if s[j] == 0.0 or abs(s[j]) <= 1e-14 * norm:
        raise DegenerateTargetError(
            f"component {j} of the covariance column is zero; the direct estimate has no noise"
        )
    others = [k for k in range(p) if k != j]
    A = np.zeros((p, p))
    A[:, 0] = s
    A[others, np.arange(1, p)] = 1.0
    Q, R = np.linalg.qr(A)
    Q = Q * np.where(np.diag(R) < 0, -1.0, 1.0)
    return Basis(G=Q[:, 1:], j=j, excluded=(s / norm)[:, None])


def _chol_with_jitter(C):
    """Cholesky factor of ``C``, retrying once with a trace-scaled jitter."""
    try:
        return linalg.cho_factor(C, lower=True)
    except linalg.LinAlgError:
        k = C.shape[0]
        jitter = 1e-10 * np.trace(C) / k
        try:
            return linalg.cho_factor(C + jitter * np.eye(k), lower=True)
        except linalg.LinAlgError as exc:
            raise ConditioningError("inner covariance G^T (Psi + Sigma) G is not positive definite") from exc


def conditional_moments(mu, Psi, Sigma, basis: Basis, y, sigma_tilde=None) -> IndirectMoments:
    """Moments of ``theta | G^T y`` under ``theta ~ N(mu, Psi)``, ``y ~ N(theta, Sigma)``.

    Uses ``V = Psi - Psi G [G^T (Psi + Sigma) G]^{-1} G^T Psi`` and the
    matching mean, so only a (p-1) x (p-1) matrix is factorized.  The shift
    is ``2 m_j s / v_jj`` with ``s = sqrt(Sigma_jj)`` unless ``sigma_tilde``
    is given (the t-statistic case).
    """
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (basis.p,))
    Psi = np.asarray(Psi, dtype=float)
    Sigma = np.asarray(Sigma, dtype=float)
    y = np.asarray(y, dtype=float)
    G = basis.G
    cf = _chol_with_jitter(G.T @ (Psi + Sigma) @ G)
    PG = Psi @ G
    m = mu + PG @ linalg.cho_solve(cf, G.T @ (y - mu))
    V = Psi - PG @ linalg.cho_solve(cf, PG.T)
    V = (V + V.T) / 2.0
    j = basis.j
    v_jj = float(V[j, j])
    if not v_jj > 0:
        raise ConditioningError(f"conditional variance {v_jj} is not positive")
    scale = np.sqrt(Sigma[j, j]) if sigma_tilde is None else sigma_tilde
    return IndirectMoments(m_j=float(m[j]), v_jj=v_jj, b=2.0 * float(m[j]) * scale / v_jj, m=m, V=V)


def conditional_moments_precision(mu, Psi, Sigma, basis: Basis, y):
    """Same moments from the information form ``V = [Psi^-1 + G (G^T Sigma G)^-1 G^T]^-1``.

    Slower and less stable; kept as an independent route for checking.
    """
    mu = np.broadcast_to(np.asarray(mu, dtype=float), (basis.p,))
    G = basis.G
    inner = G @ np.linalg.solve(G.T @ Sigma @ G, G.T)
    Psi_inv = np.linalg.inv(Psi)
    V = np.linalg.inv(Psi_inv + inner)
    m = V @ (Psi_inv @ mu + inner @ y)
    return m, (V + V.T) / 2.0
