"""Comparison estimators: IPW-weighted MSM with logistic PS, and linear ICE."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import LongitudinalDataset, build_history
from .inference import bootstrap_se
from .learners import LearnerSpec, fit_learner, predict
from .nuisance import DEFAULT_TRIM

__all__ = ["BaselineEstimate", "msm_lm", "ice_lm", "msm_lm_ate", "ice_lm_ate", "exposure_marginals"]


@dataclass
class BaselineEstimate:
    method: str
    ate: float
    se: float | None = None
    ci: tuple[float, float] | None = None
    diagnostics: dict = field(default_factory=dict)


def logistic_propensity(ds: LongitudinalDataset) -> np.ndarray:
    """P(A_t = 1 | history) from one logistic regression per visit, shape (n, T)."""
    out = np.empty(ds.exposures.shape)
    spec = LearnerSpec("logistic")
    for t in range(1, ds.n_timepoints + 1):
        X = build_history(ds, t).matrix
        y = ds.exposures[:, t - 1].astype(float)
        out[:, t - 1] = predict(fit_learner(spec, X, y, "classification"), X)
    return out


def exposure_marginals(ds: LongitudinalDataset) -> np.ndarray:
    """P(A_t = 1 | A_1..A_{t-1}) from logistic fits on past exposures only."""
    A = ds.exposures.astype(float)
    out = np.empty(A.shape)
    out[:, 0] = A[:, 0].mean()
    spec = LearnerSpec("logistic")
    for t in range(2, ds.n_timepoints + 1):
        X = A[:, : t - 1]
        out[:, t - 1] = predict(fit_learner(spec, X, A[:, t - 1], "classification"), X)
    return out


def _msm_fit(ds, outcome_j, trim, propensity=None, weights=None, stabilized=False):
    A = ds.exposures.astype(float)
    if weights is None:
        p = logistic_propensity(ds) if propensity is None else np.asarray(propensity, float)
        if p.shape != A.shape:
            raise ValueError(f"propensity must have shape {A.shape}")
        if trim is not None:
            p = np.clip(p, trim[0], trim[1])
        obs = np.where(A == 1, p, 1 - p)
        weights = 1.0 / np.prod(obs, axis=1)
        if stabilized:
            m = exposure_marginals(ds)
            weights = weights * np.prod(np.where(A == 1, m, 1 - m), axis=1)
    weights = np.asarray(weights, dtype=float)
    D = np.hstack([np.ones((A.shape[0], 1)), A])
    sw = np.sqrt(weights)
    Dw = D * sw[:, None]
    if np.linalg.matrix_rank(Dw) < D.shape[1]:
        raise np.linalg.LinAlgError("weighted MSM design is rank deficient")
    beta, *_ = np.linalg.lstsq(Dw, ds.outcome(ds.n_timepoints, outcome_j) * sw, rcond=None)
    return beta, weights


def msm_lm_ate(
    ds, outcome_j=0, trim=DEFAULT_TRIM, propensity=None, weights=None, stabilized=False
) -> float:
    beta, _ = _msm_fit(ds, outcome_j, trim, propensity, weights, stabilized)
    return float(beta[1:].sum())


def msm_lm(
    ds: LongitudinalDataset,
    outcome_j: int = 0,
    trim=DEFAULT_TRIM,
    *,
    propensity=None,
    weights=None,
    stabilized: bool = False,
    B: int = 0,
    seed: int = 0,
    alpha: float = 0.05,
) -> BaselineEstimate:
    """Weighted least squares of Y_T on (1, A_1..A_T), weights 1 / prod(PS).

    ``propensity`` injects known P(A_t = 1) values; ``weights`` bypasses the
    PS entirely.  ``stabilized`` multiplies the weights by the product of
    P(A_t | past exposures).  ``B > 0`` adds a bootstrap SE (PS refitted per
    resample).
    """
    beta, w = _msm_fit(ds, outcome_j, trim, propensity, weights, stabilized)
    q = np.quantile(w, [0.0, 0.25, 0.5, 0.75, 0.99, 1.0])
    diag = {"coefficients": beta.tolist(), "weight_quantiles": q.tolist()}
    est = BaselineEstimate("msm_lm", float(beta[1:].sum()), diagnostics=diag)
    if B:
        if propensity is not None or weights is not None:
            raise ValueError("bootstrap needs the PS to be refitted; drop injected values")
        bs = bootstrap_se(
            lambda d: msm_lm_ate(d, outcome_j, trim, stabilized=stabilized), ds, B, seed, alpha
        )
        est.se, est.ci = bs.se, bs.ci
        est.diagnostics["bootstrap_failures"] = bs.failures
    return est


def _ols_multi(X, Y):
    D = np.hstack([np.ones((X.shape[0], 1)), X])
    beta, _, rank, _ = np.linalg.lstsq(D, Y, rcond=None)
    if rank < D.shape[1]:
        raise np.linalg.LinAlgError("ICE-lm design is rank deficient")
    return beta


def ice_lm_means(ds: LongitudinalDataset, outcome_j: int = 0, regimes=None) -> dict:
    """Mean counterfactual outcome per regime from linear ICE with overrides."""
    T = ds.n_timepoints
    if regimes is None:
        regimes = [(0,) * T, (1,) * T]
    regimes = [tuple(int(v) for v in r) for r in regimes]
    cur = np.tile(ds.outcome(T, outcome_j)[:, None], (1, len(regimes)))
    for t in range(T, 0, -1):
        hist = build_history(ds, t, include_current_exposure=True)
        beta = _ols_multi(hist.matrix, cur)
        nxt = np.empty_like(cur)
        for m, reg in enumerate(regimes):
            X = hist.with_exposure(t, reg[t - 1])
            nxt[:, m] = beta[0, m] + X @ beta[1:, m]
        cur = nxt
    return {reg: float(cur[:, m].mean()) for m, reg in enumerate(regimes)}


def ice_lm_ate(ds, outcome_j=0) -> float:
    T = ds.n_timepoints
    m = ice_lm_means(ds, outcome_j)
    return m[(1,) * T] - m[(0,) * T]


def ice_lm(
    ds: LongitudinalDataset,
    outcome_j: int = 0,
    *,
    B: int = 0,
    seed: int = 0,
    alpha: float = 0.05,
) -> BaselineEstimate:
    """Linear-regression ICE g-computation, all-ones versus all-zeros regime."""
    est = BaselineEstimate("ice_lm", ice_lm_ate(ds, outcome_j))
    if B:
        bs = bootstrap_se(lambda d: ice_lm_ate(d, outcome_j), ds, B, seed, alpha)
        est.se, est.ci = bs.se, bs.ci
        est.diagnostics["bootstrap_failures"] = bs.failures
    return est
