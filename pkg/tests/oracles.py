"""Independent reference implementations used only by the tests.

They favour transparency over speed: high-precision mpmath arithmetic,
plain bisection, explicit joint-Gaussian conditioning and loop-based
multiple testing.
"""

import math

import mpmath as mp
import numpy as np

mp.mp.dps = 40


def ncdf(x):
    return mp.ncdf(mp.mpf(x))


def tcdf(x, nu):
    """Student t CDF through the regularized incomplete beta function."""
    x = mp.mpf(x)
    nu = mp.mpf(nu)
    tail = mp.betainc(nu / 2, mp.mpf(1) / 2, 0, nu / (nu + x * x), regularized=True) / 2
    return 1 - tail if x >= 0 else tail


def fab_p(z, b, cdf=ncdf):
    """``1 - |F(z + b) - F(-z)|`` at 400 digits, enough to survive the subtraction in far tails."""
    with mp.workdps(400):
        return float(1 - abs(cdf(mp.mpf(z) + b) - cdf(-mp.mpf(z))))


def fab_p_t(t, b, nu):
    return fab_p(t, b, lambda x: tcdf(x, nu))


def bisect(f, lo, hi, tol=1e-15, max_iter=400):
    flo = f(lo)
    for _ in range(max_iter):
        mid = (lo + hi) / 2
        fm = f(mid)
        if (fm > 0) == (flo > 0):
            lo, flo = mid, fm
        else:
            hi = mid
        if hi - lo < tol:
            break
    return (lo + hi) / 2


def half_width(u, b):
    """Bisection for ``c >= 0`` with ``Phi(-c - b/2) + Phi(-c + b/2) = u``."""
    hb = mp.mpf(b) / 2
    f = lambda c: ncdf(-c - hb) + ncdf(-c + hb) - u
    return float(bisect(f, mp.mpf(0), abs(hb) + 40, tol=mp.mpf(10) ** -30))


def condition_joint(mu, Psi, Sigma, G, y):
    """Moments of ``theta | G^T y`` from the stacked vector ``(theta, G^T Y)``.

    The joint covariance is built explicitly and conditioned by block
    inversion in 40-digit arithmetic.
    """
    p = len(mu)
    M = mp.matrix
    mu_, Psi_, Sig_, G_, y_ = M(list(mu)), M(Psi.tolist()), M(Sigma.tolist()), M(G.tolist()), M(list(y))
    Gt = G_.T
    c11 = Psi_
    c12 = Psi_ * G_
    c22 = Gt * (Psi_ + Sig_) * G_
    inv = mp.inverse(c22)
    m = mu_ + c12 * inv * (Gt * y_ - Gt * mu_)
    V = c11 - c12 * inv * c12.T
    m = np.array([float(m[i]) for i in range(p)])
    V = np.array([[float(V[i, k]) for k in range(p)] for i in range(p)])
    return m, V


def mvn_logpdf(x, mean, cov):
    """Dense multivariate normal log-density at 40 digits."""
    k = len(x)
    C = mp.matrix(np.asarray(cov).tolist())
    r = mp.matrix([mp.mpf(a) - mp.mpf(b) for a, b in zip(x, mean)])
    quad = (r.T * mp.inverse(C) * r)[0]
    return float(-(k * mp.log(2 * mp.pi) + mp.log(mp.det(C)) + quad) / 2)


def bh_bruteforce(pvals, q):
    """Largest ``k`` with ``p_(k) <= q k / m``; rejects every p at or below ``p_(k)``."""
    p = list(pvals)
    m = len(p)
    srt = sorted(p)
    for k in range(m, 0, -1):
        if srt[k - 1] <= q * k / m:
            return sorted(i for i, v in enumerate(p) if v <= srt[k - 1])
    return []


def ols_textbook(X, y):
    """Coefficients, standard errors and two-sided t p-values from the normal equations."""
    n, k = X.shape
    XtX = mp.matrix(X.T @ X)
    inv = mp.inverse(XtX)
    Xty = mp.matrix(X.T @ y)
    beta = inv * Xty
    bvec = np.array([float(beta[i]) for i in range(k)])
    resid = y - X @ bvec
    s2 = float(resid @ resid) / (n - k)
    se = np.array([math.sqrt(s2 * float(inv[i, i])) for i in range(k)])
    t = bvec / se
    pv = np.array([float(2 * (1 - tcdf(abs(ti), n - k))) for ti in t])
    return bvec, se, t, pv


def random_pd(rng, p, scale=1.0):
    A = rng.standard_normal((p, p))
    return scale * (A @ A.T / p + 0.5 * np.eye(p))
