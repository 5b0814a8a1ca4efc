"""Doubly-robust estimating equation for a linear marginal structural model.

The MSM is ``tau(a; theta) = beta_0 + sum_t beta_t a_t`` with
``d(a) = (1, a_1, ..., a_T)``.  For subject i the score is

    psi_i(theta) = S0_i(theta) + S1_i + S2_i

    S0 = sum over regimes a of d(a) (eta_1(a) - tau(a; theta))
    S1 = sum over t < T and tails b of the visits after t:
             d(A_1..A_t, b) w_t (eta_{t+1}(b) - eta_t(A_t, b))
    S2 = d(A) w_T (Y_T - eta_T(A_T))

where ``w_t`` is the inverse product of observed-arm propensities up to t
and the eta columns hold earlier exposures at their observed values.  Only
S0 involves theta, and it does so affinely with slope ``-G`` where
``G = sum_a d(a) d(a)'``.  Setting the sample mean to zero is therefore the
linear system ``G theta = mean_i(sum_a d(a) eta_1,i(a) + S1_i + S2_i)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataset import FoldSplit, LongitudinalDataset, enumerate_regimes
from .nuisance import IceStack, PropensityFit, cumulative_weights

__all__ = [
    "MsmSpec",
    "ScoreTriple",
    "ThetaEstimate",
    "ConvergenceError",
    "SingularSystemError",
    "ProvenanceError",
    "compute_scores",
    "solve_linear",
    "newton",
    "solve_newton",
    "crossfit_estimate",
    "ProbeResult",
    "orthogonality_probe",
]

# largest condition number accepted by the linear solver
MAX_CONDITION = 1e12


class ConvergenceError(RuntimeError):
    def __init__(self, message, theta=None, norm=None, n_iter=None):
        super().__init__(message)
        self.theta = theta
        self.norm = norm
        self.n_iter = n_iter


class SingularSystemError(np.linalg.LinAlgError):
    pass


class ProvenanceError(ValueError):
    pass


@dataclass(frozen=True)
class MsmSpec:
    """Linear MSM over T binary exposures."""

    n_timepoints: int

    def __post_init__(self):
        if self.n_timepoints < 1:
            raise ValueError("need at least one timepoint")

    @property
    def dim(self) -> int:
        return self.n_timepoints + 1

    @property
    def regimes(self) -> np.ndarray:
        return np.array([r.values for r in enumerate_regimes(self.n_timepoints)], dtype=float)

    def d(self, a) -> np.ndarray:
        """Gradient of tau in theta, ``(1, a_1, ..., a_T)``; rows for 2-d input."""
        a = np.asarray(a, dtype=float)
        if a.shape[-1] != self.n_timepoints:
            raise ValueError(f"regime length {a.shape[-1]} != {self.n_timepoints}")
        ones = np.ones(a.shape[:-1] + (1,))
        return np.concatenate([ones, a], axis=-1)

    def tau(self, a, theta) -> np.ndarray:
        return self.d(a) @ np.asarray(theta, dtype=float)

    @property
    def design(self) -> np.ndarray:
        """Rows ``d(a)`` over all regimes in enumeration order."""
        return self.d(self.regimes)

    @property
    def gram(self) -> np.ndarray:
        D = self.design
        return D.T @ D

    @property
    def contrast(self) -> np.ndarray:
        """Coefficient vector picking ``beta_1 + ... + beta_T``."""
        c = np.ones(self.dim)
        c[0] = 0.0
        return c

    def jacobian(self) -> np.ndarray:
        """Derivative of the per-subject score in theta (identical for all subjects)."""
        return -self.gram


@dataclass
class ScoreTriple:
    """Per-subject score components at ``theta``; arrays are ``(n, T+1)``.

    ``anchor`` is ``sum_a d(a) eta_1(a)``, so ``s0 = anchor - gram @ theta``.
    """

    s0: np.ndarray
    s1: np.ndarray
    s2: np.ndarray
    anchor: np.ndarray
    theta: np.ndarray
    gram: np.ndarray
    source_role: np.ndarray | None = None
    folds: FoldSplit | None = None

    @property
    def psi(self) -> np.ndarray:
        return self.s0 + self.s1 + self.s2

    @property
    def n(self) -> int:
        return self.s0.shape[0]

    def mean_score(self) -> np.ndarray:
        return self.psi.mean(axis=0)

    def at(self, theta) -> "ScoreTriple":
        """Same nuisances, different theta (only S0 changes)."""
        theta = np.array(theta, dtype=float)
        s0 = self.anchor - self.gram @ theta
        return ScoreTriple(
            s0, self.s1, self.s2, self.anchor, theta, self.gram, self.source_role, self.folds
        )

    def to_json(self) -> str:
        roles = None if self.source_role is None else [str(r) for r in self.source_role]
        return json.dumps(
            {
                "format": "longicausal.scores",
                "version": 1,
                "theta": self.theta.tolist(),
                "s0": self.s0.tolist(),
                "s1": self.s1.tolist(),
                "s2": self.s2.tolist(),
                "source_role": roles,
            },
            sort_keys=True,
        )


@dataclass
class ThetaEstimate:
    theta: np.ndarray
    solver: str
    condition_number: float
    n_iter: int = 0
    score_norm: float = 0.0
    scores: ScoreTriple | None = field(default=None, repr=False)

    @property
    def ate(self) -> float:
        return float(np.sum(self.theta[1:]))


def _same_folds(f1, f2) -> bool:
    if f1 is None or f2 is None:
        return f1 is None and f2 is None
    return f1 == f2


def compute_scores(
    ds: LongitudinalDataset,
    pf: PropensityFit,
    ice: IceStack,
    msm: MsmSpec | None = None,
    theta=None,
    *,
    outcome_j: int | None = None,
) -> ScoreTriple:
    """Per-subject score components; see the module docstring for the formulas."""
    T = ds.n_timepoints
    msm = MsmSpec(T) if msm is None else msm
    if msm.n_timepoints != T or ice.n_timepoints != T or pf.n_timepoints != T:
        raise ValueError("timepoint count differs between data, nuisances and MSM")
    if not _same_folds(pf.folds, ice.folds):
        raise ProvenanceError("propensity and ICE nuisances were fitted on different fold splits")
    theta = np.zeros(msm.dim) if theta is None else np.array(theta, dtype=float)
    j = ice.outcome_j if outcome_j is None else outcome_j
    A = ds.exposures.astype(float)
    n = A.shape[0]
    G = msm.gram

    anchor = np.zeros((n, msm.dim))
    for reg in msm.regimes:
        anchor += np.outer(ice.columns[1][tuple(int(v) for v in reg)], msm.d(reg))

    s1 = np.zeros((n, msm.dim))
    for t in range(1, T):
        w = cumulative_weights(pf, t)
        a_obs = A[:, t - 1].astype(int)
        for tail in ice.suffixes(t + 1):
            nxt = ice.columns[t + 1][tail]
            cur = np.where(a_obs == 1, ice.columns[t][(1,) + tail], ice.columns[t][(0,) + tail])
            dmat = msm.d(np.hstack([A[:, :t], np.broadcast_to(np.asarray(tail, float), (n, T - t))]))
            s1 += dmat * (w * (nxt - cur))[:, None]

    wT = cumulative_weights(pf, T)
    eta_T = np.where(A[:, T - 1] == 1, ice.columns[T][(1,)], ice.columns[T][(0,)])
    s2 = msm.d(A) * (wT * (ds.outcome(T, j) - eta_T))[:, None]

    s0 = anchor - G @ theta
    return ScoreTriple(s0, s1, s2, anchor, theta, G, ice.source_role, ice.folds)


def _svd_solve(G, b):
    U, s, Vt = np.linalg.svd(G)
    if s[-1] <= 0 or not np.all(np.isfinite(s)):
        raise SingularSystemError("singular estimating-equation system")
    cond = float(s[0] / s[-1])
    if cond > MAX_CONDITION:
        raise SingularSystemError(f"estimating-equation system is singular (condition {cond:.3g})")
    return Vt.T @ ((U.T @ b) / s), cond


def solve_linear(scores: ScoreTriple) -> ThetaEstimate:
    """Closed-form root of the mean score (linear MSM)."""
    rhs = (scores.anchor + scores.s1 + scores.s2).mean(axis=0)
    theta, cond = _svd_solve(scores.gram, rhs)
    at = scores.at(theta)
    return ThetaEstimate(theta, "closed_form", cond, 0, float(np.linalg.norm(at.mean_score())), at)


def newton(
    fun: Callable[[np.ndarray], np.ndarray],
    jac: Callable[[np.ndarray], np.ndarray],
    theta_init,
    tol: float = 1e-10,
    max_iter: int = 100,
):
    """Newton-Raphson on ``fun(theta) = 0``; returns ``(theta, n_iter, norm, cond)``."""
    theta = np.array(theta_init, dtype=float)
    cond = float("nan")
    for it in range(max_iter + 1):
        m = fun(theta)
        norm = float(np.linalg.norm(m))
        if norm < tol:
            return theta, it, norm, cond
        if it == max_iter:
            break
        step, cond = _svd_solve(jac(theta), m)
        theta = theta - step
    raise ConvergenceError(
        f"Newton-Raphson did not converge in {max_iter} iterations (score norm {norm:.3g})",
        theta, norm, max_iter,
    )


def solve_newton(
    ds: LongitudinalDataset,
    pf: PropensityFit,
    ice: IceStack,
    msm: MsmSpec | None = None,
    theta_init=None,
    tol: float = 1e-10,
    max_iter: int = 100,
) -> ThetaEstimate:
    """Root of the mean score by Newton-Raphson, recomputing scores each step."""
    msm = MsmSpec(ds.n_timepoints) if msm is None else msm
    theta0 = np.zeros(msm.dim) if theta_init is None else theta_init

    def fun(theta):
        return compute_scores(ds, pf, ice, msm, theta).mean_score()

    theta, it, norm, cond = newton(fun, lambda _th: msm.jacobian(), theta0, tol, max_iter)
    if np.isnan(cond):
        cond = float(np.linalg.cond(msm.gram))
    return ThetaEstimate(theta, "newton", cond, it, norm, compute_scores(ds, pf, ice, msm, theta))


def crossfit_estimate(
    ds: LongitudinalDataset,
    folds: FoldSplit,
    pf: PropensityFit,
    ice: IceStack,
    msm: MsmSpec | None = None,
) -> ThetaEstimate:
    """Pooled cross-fit solve: each subject is scored with opposite-fold nuisances."""
    for name, obj in (("propensity", pf), ("ICE", ice)):
        if obj.folds is not None and obj.folds != folds:
            raise ProvenanceError(f"{name} nuisances were fitted on a different fold split")
    return solve_linear(compute_scores(ds, pf, ice, msm))


@dataclass
class ProbeResult:
    """Directional derivative of the mean score at r = 0."""

    derivative: np.ndarray
    standard_error: np.ndarray
    mean_scores: np.ndarray
    r_grid: np.ndarray

    @property
    def z(self) -> np.ndarray:
        se = np.where(self.standard_error > 0, self.standard_error, np.inf)
        return self.derivative / se


def _perturbed(ds, eta, p1, delta_eta, delta_p, r):
    p = np.asarray(p1, float) + (0.0 if delta_p is None else r * np.asarray(delta_p, float))
    if np.any((p <= 0) | (p >= 1)):
        raise ValueError(f"perturbation at r={r} leaves (0, 1)")
    pf = PropensityFit.from_probabilities(ds, p, trim=None)
    cols = {
        t: {
            k: v + (0.0 if delta_eta is None else r * np.asarray(delta_eta[t][k], float))
            for k, v in eta.columns[t].items()
        }
        for t in eta.columns
    }
    return pf, IceStack.from_columns(eta.n_timepoints, cols, eta.outcome_j)


def orthogonality_probe(
    ds: LongitudinalDataset,
    eta: IceStack,
    p1,
    theta,
    delta_eta=None,
    delta_p=None,
    r_grid: Sequence[float] = (-1e-3, 0.0, 1e-3),
    score: str = "full",
) -> ProbeResult:
    """Central-difference derivative of the mean score along a nuisance direction.

    ``p1`` holds the reference P(A_t = 1) values (untrimmed) and ``eta`` the
    reference ICE columns.  ``delta_eta`` has the same nested layout as
    ``eta.columns`` and ``delta_p`` the shape of ``p1``.  The derivative uses
    the smallest positive r in the grid and its negative; its standard error
    comes from the per-subject difference quotients.  ``score="ipw"`` probes
    the final weighted-residual term alone instead of the full score.
    """
    if score not in ("full", "ipw"):
        raise ValueError("score must be 'full' or 'ipw'")
    r_grid = np.asarray(sorted(set(float(r) for r in r_grid)))
    pos = r_grid[r_grid > 0]
    if pos.size == 0 or -pos.min() not in r_grid:
        raise ValueError("r_grid needs a symmetric pair around 0")
    h = float(pos.min())
    msm = MsmSpec(ds.n_timepoints)

    def per_subject(r):
        pf, ice = _perturbed(ds, eta, p1, delta_eta, delta_p, r)
        sc = compute_scores(ds, pf, ice, msm, theta)
        return sc.s2 if score == "ipw" else sc.psi

    means = np.array([per_subject(r).mean(axis=0) for r in r_grid])
    diff = (per_subject(h) - per_subject(-h)) / (2 * h)
    n = diff.shape[0]
    return ProbeResult(diff.mean(axis=0), diff.std(axis=0, ddof=1) / np.sqrt(n), means, r_grid)
