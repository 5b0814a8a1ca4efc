"""Stacked ensembles: base learners fit on one fold, meta regression on the other.

Regression stacks combine base predictions linearly,
``intercept + sum_m w_m * f_m(x)``; classification stacks pass the same kind
of weighted sum of base probabilities through the logistic link.  Meta
weights are plain (unconstrained) least-squares or logistic coefficients.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .learners import (
    RIDGE_JITTER,
    FittedLearner,
    LearnerSpec,
    expit,
    fit_learner,
    irls_logistic,
    learner_from_dict,
    learner_to_dict,
    predict,
    tune,
)

__all__ = [
    "StackedRegressor",
    "StackedClassifier",
    "fit_stacked",
    "predict_stacked",
    "derive_seed",
    "COLLINEARITY_COND",
]

# condition number of the meta design above which the stack is flagged
COLLINEARITY_COND = 1e8


def derive_seed(base: int, *keys: int) -> int:
    """Independent 31-bit seed for a (base, key...) coordinate."""
    ss = np.random.SeedSequence(int(base), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1)[0] & 0x7FFFFFFF)


@dataclass
class _Stack:
    base_models: list
    meta_weights: np.ndarray
    train_rows: np.ndarray | None = None
    meta_rows: np.ndarray | None = None
    chosen_specs: list = field(default_factory=list)
    flags: dict = field(default_factory=dict)
    fit_intercept: bool = True

    def __post_init__(self):
        self.meta_weights = np.asarray(self.meta_weights, dtype=float)
        if self.meta_weights.shape != (len(self.base_models) + 1,):
            raise ValueError(
                f"expected {len(self.base_models) + 1} meta weights (intercept first), "
                f"got {self.meta_weights.shape}"
            )

    def base_predictions(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        return np.column_stack([predict(m, X) for m in self.base_models])

    def linear_score(self, X) -> np.ndarray:
        return self.meta_weights[0] + self.base_predictions(X) @ self.meta_weights[1:]

    def predict(self, X) -> np.ndarray:
        return predict_stacked(self, X)

    def to_dict(self) -> dict:
        return {
            "format": "longicausal.stack",
            "version": 1,
            "task": self.task,
            "base_models": [learner_to_dict(m) for m in self.base_models],
            "meta_weights": self.meta_weights.tolist(),
            "fit_intercept": self.fit_intercept,
            "flags": {k: v for k, v in self.flags.items()},
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class StackedRegressor(_Stack):
    task = "regression"


@dataclass
class StackedClassifier(_Stack):
    task = "classification"


def stack_from_dict(doc) -> _Stack:
    if doc.get("format") != "longicausal.stack":
        raise ValueError("not a stack document")
    cls = StackedClassifier if doc["task"] == "classification" else StackedRegressor
    return cls(
        [learner_from_dict(d) for d in doc["base_models"]],
        np.asarray(doc["meta_weights"]),
        fit_intercept=doc.get("fit_intercept", True),
        flags=dict(doc.get("flags", {})),
    )


def predict_stacked(model: _Stack, X) -> np.ndarray:
    """Linear (regression) or logistic-link (classification) combination."""
    score = model.linear_score(X)
    if isinstance(model, StackedClassifier):
        return np.clip(expit(score), 1e-12, 1 - 1e-12)
    return score


def _meta_design(P, fit_intercept):
    ones = np.ones((P.shape[0], 1)) if fit_intercept else np.zeros((P.shape[0], 1))
    return np.hstack([ones, P])


def _fit_meta_regression(P, y, fit_intercept):
    D = _meta_design(P, fit_intercept)
    G = D.T @ D
    G[np.diag_indices_from(G)] += RIDGE_JITTER
    w = np.linalg.solve(G, D.T @ y)
    if not fit_intercept:
        w[0] = 0.0
    return w


def _fit_meta_classifier(P, y, fit_intercept):
    if y.min() == y.max():
        w = np.zeros(P.shape[1] + 1)
        p = min(max(float(y[0]), 1e-12), 1 - 1e-12)
        w[0] = np.log(p / (1 - p))
        return w, False
    D = _meta_design(P, fit_intercept)
    if not fit_intercept:
        D = D[:, 1:]
    beta, conv, _ = irls_logistic(D, y)
    if not fit_intercept:
        beta = np.concatenate([[0.0], beta])
    return beta, conv


def fit_stacked(
    base_specs: Sequence[LearnerSpec | Sequence[LearnerSpec]],
    train,
    meta,
    task: str = "regression",
    *,
    seed: int | None = None,
    tune_folds: int = 3,
    tuned: Sequence[LearnerSpec] | None = None,
    train_rows=None,
    meta_rows=None,
    fit_intercept: bool = True,
) -> StackedRegressor | StackedClassifier:
    """Tune and fit base learners on ``train``, then the meta model on ``meta``.

    Parameters
    ----------
    base_specs : one entry per base learner, either a single spec or a
        tuning grid of specs.
    train, meta : ``(X, y)`` pairs drawn from disjoint subject folds.
    seed : when given, every candidate is re-seeded from it (per learner
        position) and tuning folds are drawn from it as well.
    tuned : already-chosen specs, one per base learner; skips tuning.
    train_rows, meta_rows : subject indices, kept for fold bookkeeping.
    """
    Xtr, ytr = (np.asarray(a, dtype=float) for a in train)
    Xme, yme = (np.asarray(a, dtype=float) for a in meta)
    if Xtr.shape[0] == 0 or Xme.shape[0] == 0:
        raise ValueError("empty fold")
    if not base_specs:
        raise ValueError("need at least one base learner")
    if train_rows is not None and meta_rows is not None:
        if np.intersect1d(np.asarray(train_rows), np.asarray(meta_rows)).size:
            raise ValueError("train and meta folds share subjects")
    grids = [[g] if isinstance(g, LearnerSpec) else list(g) for g in base_specs]
    if seed is not None:
        grids = [[s.with_seed(derive_seed(seed, m)) for s in g] for m, g in enumerate(grids)]
    if tuned is None:
        metric = "log_loss" if task == "classification" else "mse"
        tune_seed = 0 if seed is None else derive_seed(seed, 10_000)
        chosen = [
            tune(g, Xtr, ytr, k=tune_folds, metric=metric, seed=tune_seed, task=task)
            for g in grids
        ]
    else:
        chosen = list(tuned)
        if len(chosen) != len(grids):
            raise ValueError("one tuned spec per base learner required")
    bases: list[FittedLearner] = [fit_learner(s, Xtr, ytr, task) for s in chosen]
    P = np.column_stack([predict(m, Xme) for m in bases])
    D = _meta_design(P, fit_intercept)
    if not fit_intercept:
        D = D[:, 1:]
    cond = float(np.linalg.cond(D)) if D.shape[0] >= D.shape[1] else np.inf
    flags = {"meta_condition": cond, "collinear": bool(not np.isfinite(cond) or cond > COLLINEARITY_COND)}
    if task == "classification":
        w, conv = _fit_meta_classifier(P, yme, fit_intercept)
        flags["meta_converged"] = bool(conv)
        cls = StackedClassifier
    else:
        w = _fit_meta_regression(P, yme, fit_intercept)
        cls = StackedRegressor
    return cls(
        bases,
        w,
        train_rows=None if train_rows is None else np.asarray(train_rows),
        meta_rows=None if meta_rows is None else np.asarray(meta_rows),
        chosen_specs=chosen,
        flags=flags,
        fit_intercept=fit_intercept,
    )
