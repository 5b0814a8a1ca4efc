"""Linear-family solvers on standardized designs.

All routines work on an already standardized feature matrix and return
coefficients on that scale; the caller maps them back to raw features.
"""

from __future__ import annotations

import numpy as np
from numba import njit

RIDGE_JITTER = 1e-8


def expit(z):
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def ols(Xs, y):
    """Least squares with intercept; returns ``(intercept, slopes)``."""
    n = Xs.shape[0]
    D = np.hstack([np.ones((n, 1)), Xs])
    beta, *_ = np.linalg.lstsq(D, y, rcond=None)
    return float(beta[0]), beta[1:]


def _penalized_loglik(D, y, beta, lam):
    eta = D @ beta
    # log(1 + exp(eta)) computed stably
    ll = np.sum(y * eta - np.logaddexp(0.0, eta))
    return ll - 0.5 * lam * np.sum(beta[1:] ** 2)


def irls_logistic(D, y, jitter=RIDGE_JITTER, max_iter=100, tol=1e-10):
    """Newton/IRLS for logistic regression with a tiny ridge on the slopes.

    ``D`` must already contain the intercept column (first).  The ridge keeps
    the optimum finite under (quasi-)separation.  Returns ``(beta, converged,
    n_iter)``.
    """
    n, k = D.shape
    beta = np.zeros(k)
    ybar = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
    beta[0] = np.log(ybar / (1 - ybar))
    pen = np.full(k, jitter)
    pen[0] = 0.0
    obj = _penalized_loglik(D, y, beta, jitter)
    for it in range(1, max_iter + 1):
        mu = expit(D @ beta)
        w = mu * (1 - mu)
        grad = D.T @ (y - mu) - pen * beta
        if np.max(np.abs(grad)) < 1e-9:
            return beta, True, it - 1
        H = (D * w[:, None]).T @ D
        H[np.diag_indices_from(H)] += jitter
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(H, grad, rcond=None)[0]
        s = 1.0
        for _ in range(40):
            cand = beta + s * step
            new_obj = _penalized_loglik(D, y, cand, jitter)
            if new_obj >= obj - 1e-12 * abs(obj):
                break
            s *= 0.5
        beta, obj = cand, new_obj
        if np.max(np.abs(s * step)) < tol:
            return beta, True, it
    return beta, False, max_iter


@njit(cache=True)
def _cd_gram(Q, c, beta, l1, l2, penalized, tol, max_sweeps):
    """Cyclic coordinate descent for 0.5 b'Qb - c'b + l1|b|_1 + 0.5 l2|b|^2.

    Unpenalized coordinates (``penalized[j] == False``) get neither term.
    Returns the number of sweeps used.
    """
    p = c.shape[0]
    grad = c - Q @ beta
    for sweep in range(max_sweeps):
        max_delta = 0.0
        for j in range(p):
            qjj = Q[j, j]
            old = beta[j]
            rho = grad[j] + qjj * old
            if penalized[j]:
                denom = qjj + l2
                if rho > l1:
                    new = (rho - l1) / denom
                elif rho < -l1:
                    new = (rho + l1) / denom
                else:
                    new = 0.0
            else:
                new = rho / qjj if qjj > 0 else 0.0
            if new != old:
                delta = new - old
                beta[j] = new
                for m in range(p):
                    grad[m] -= Q[m, j] * delta
                if abs(delta) > max_delta:
                    max_delta = abs(delta)
        if max_delta < tol:
            return sweep + 1
    return max_sweeps


def enet_lambda_max(Xs, y, alpha):
    """Smallest penalty that zeroes every slope."""
    n = Xs.shape[0]
    if Xs.shape[1] == 0:
        return 0.0
    # at the intercept-only fit both losses have gradient Xs'(y - ybar)/n
    grad = np.abs(Xs.T @ (y - y.mean())) / n
    return float(grad.max() / max(alpha, 1e-3))


def enet_gaussian(Xs, y, lam, alpha, tol=1e-7, max_sweeps=10_000):
    """Elastic net on standardized ``Xs`` with centered response.

    Minimizes ``(1/2n)|y - b0 - Xs b|^2 + lam*(alpha|b|_1 + (1-alpha)/2 |b|^2)``.
    Returns ``(intercept, slopes, sweeps)``.
    """
    n, p = Xs.shape
    ybar = float(y.mean())
    if p == 0:
        return ybar, np.zeros(0), 0
    Q = (Xs.T @ Xs) / n
    c = Xs.T @ (y - ybar) / n
    beta = np.zeros(p)
    sweeps = _cd_gram(
        Q, c, beta, lam * alpha, lam * (1 - alpha), np.ones(p, dtype=np.bool_), tol, max_sweeps
    )
    return ybar, beta, sweeps


def enet_logistic(Xs, y, lam, alpha, tol=1e-7, max_sweeps=10_000, max_outer=100):
    """Penalized logistic regression by IRLS outer loop and coordinate descent.

    Minimizes ``-(1/n) loglik + lam*(alpha|b|_1 + (1-alpha)/2 |b|^2)`` with an
    unpenalized intercept.  Returns ``(intercept, slopes, converged)``.
    """
    n, p = Xs.shape
    D = np.hstack([np.ones((n, 1)), Xs])
    beta = np.zeros(p + 1)
    ybar = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
    beta[0] = np.log(ybar / (1 - ybar))
    penalized = np.ones(p + 1, dtype=np.bool_)
    penalized[0] = False
    converged = False
    for _ in range(max_outer):
        eta = D @ beta
        mu = expit(eta)
        w = np.maximum(mu * (1 - mu), 1e-5)
        z = eta + (y - mu) / w
        Q = (D * w[:, None]).T @ D / n
        c = D.T @ (w * z) / n
        old = beta.copy()
        _cd_gram(Q, c, beta, lam * alpha, lam * (1 - alpha), penalized, tol, max_sweeps)
        if np.max(np.abs(beta - old)) < tol:
            converged = True
            break
    return float(beta[0]), beta[1:], converged
