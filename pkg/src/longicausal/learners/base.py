"""Base learners with deterministic seeding and grid-search tuning.

Every learner is described by a :class:`LearnerSpec` and fitted into an
immutable :class:`FittedLearner`.  The task (regression or classification)
is passed explicitly; classification targets must be 0/1 and predictions are
probabilities of class 1.

Hyperparameters by kind
-----------------------
linear, logistic
    none
elastic_net
    ``lam`` (absolute penalty) or ``lam_ratio`` (fraction of the smallest
    penalty that zeroes every slope), ``alpha`` (L1 share, default 0.5)
random_forest
    ``n_trees`` (100), ``max_depth`` (5), ``min_leaf`` (5), ``max_features``
    (share of features tried per node, default sqrt(p)/p), ``bootstrap`` (1)
gradient_boosting
    ``n_trees`` (100), ``learning_rate`` (0.1), ``max_depth`` (2),
    ``min_leaf`` (5), ``subsample`` (1.0)
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Any, Mapping, Sequence

import numpy as np

from . import _linear, _trees

__all__ = [
    "KINDS",
    "LearnerSpec",
    "FittedLearner",
    "fit_learner",
    "predict",
    "tune",
    "kkt_check",
    "default_candidates",
    "learner_to_dict",
    "learner_from_dict",
    "PROB_CLAMP",
]

KINDS = ("linear", "logistic", "elastic_net", "random_forest", "gradient_boosting")
TASKS = ("regression", "classification")
PROB_CLAMP = 1e-12
FORMAT_VERSION = 1


@dataclass(frozen=True)
class LearnerSpec:
    kind: str
    hyperparameters: Mapping[str, Any] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown learner kind {self.kind!r}; expected one of {KINDS}")
        hp = dict(self.hyperparameters)
        object.__setattr__(self, "hyperparameters", hp)
        if hp.get("lam", 0) < 0 or hp.get("lam_ratio", 0) < 0:
            raise ValueError("penalty must be >= 0")
        if not 0 <= hp.get("alpha", 0.5) <= 1:
            raise ValueError("alpha must lie in [0, 1]")
        if hp.get("max_depth", 1) < 1:
            raise ValueError("max_depth must be >= 1")
        if not 0 < hp.get("learning_rate", 0.1) <= 1:
            raise ValueError("learning_rate must lie in (0, 1]")
        if hp.get("n_trees", 1) < 1:
            raise ValueError("n_trees must be >= 1")
        if hp.get("min_leaf", 1) < 1:
            raise ValueError("min_leaf must be >= 1")
        for key in ("max_features", "subsample"):
            if key in hp and hp[key] is not None and not 0 < hp[key] <= 1:
                raise ValueError(f"{key} must lie in (0, 1]")

    def get(self, key, default=None):
        return self.hyperparameters.get(key, default)

    def with_seed(self, seed: int) -> "LearnerSpec":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "hyperparameters": dict(self.hyperparameters), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: Mapping) -> "LearnerSpec":
        return cls(d["kind"], dict(d.get("hyperparameters", {})), int(d.get("seed", 0)))


@dataclass(frozen=True)
class FittedLearner:
    """A fitted model; prediction is a pure function of these fields."""

    spec: LearnerSpec
    task: str
    n_features: int
    x_mean: np.ndarray
    x_scale: np.ndarray
    params: dict
    flags: dict = field(default_factory=dict)

    def predict(self, X) -> np.ndarray:
        return predict(self, X)


def _check_xy(X, y, task):
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.ndim != 2:
        raise ValueError("X must be a 2-D matrix")
    if X.shape[0] != y.shape[0]:
        raise ValueError(f"dimension mismatch: X has {X.shape[0]} rows, y has {y.shape[0]}")
    if y.shape[0] < 2:
        raise ValueError("need at least 2 rows")
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    if task == "classification" and not np.all((y == 0) | (y == 1)):
        raise ValueError("classification targets must be 0/1")
    return X, y


def _standardize(X):
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    scale = np.where(scale > 1e-12 * np.maximum(1.0, np.abs(mean)), scale, 1.0)
    return (X - mean) / scale, mean, scale


def _to_raw(intercept, slopes, mean, scale):
    coef = slopes / scale
    return float(intercept - np.dot(coef, mean)), coef


def fit_learner(spec: LearnerSpec, X, y, task: str = "regression") -> FittedLearner:
    """Fit ``spec`` on ``(X, y)``; deterministic given ``(spec, X, y)``."""
    X, y = _check_xy(X, y, task)
    n, p = X.shape
    flags: dict = {}
    if task == "classification" and y.min() == y.max():
        # degenerate target: intercept-only model regardless of kind
        flags["constant_target"] = True
        return FittedLearner(
            spec, task, p, np.zeros(p), np.ones(p), {"constant": float(y[0])}, flags
        )
    kind = spec.kind
    if kind in ("linear", "logistic", "elastic_net"):
        Xs, mean, scale = _standardize(X)
        if kind != "elastic_net" and task == "classification":
            # "linear" on a binary target means logistic regression
            D = np.hstack([np.ones((n, 1)), Xs])
            beta, conv, n_iter = _linear.irls_logistic(D, y)
            b0, b = float(beta[0]), beta[1:]
            flags["converged"] = bool(conv)
            flags["iterations"] = int(n_iter)
        elif kind == "logistic":
            raise ValueError("logistic learner needs a classification task")
        elif kind == "linear":
            b0, b = _linear.ols(Xs, y)
        else:
            alpha = float(spec.get("alpha", 0.5))
            if "lam" in spec.hyperparameters:
                lam = float(spec.get("lam"))
            else:
                lam = float(spec.get("lam_ratio", 0.1)) * _linear.enet_lambda_max(Xs, y, alpha)
            if task == "regression":
                b0, b, sweeps = _linear.enet_gaussian(Xs, y, lam, alpha)
                flags["sweeps"] = int(sweeps)
                flags["converged"] = bool(sweeps < 10_000)
            else:
                b0, b, conv = _linear.enet_logistic(Xs, y, lam, alpha)
                flags["converged"] = bool(conv)
            flags["lam"] = lam
            flags["alpha"] = alpha
        intercept, coef = _to_raw(b0, b, mean, scale)
        return FittedLearner(
            spec, task, p, mean, scale, {"intercept": intercept, "coef": coef}, flags
        )
    if kind == "random_forest":
        params, _ = _fit_forest(spec, X, y, task)
    else:
        params, _ = _fit_boosting(spec, X, y, task)
    return FittedLearner(spec, task, p, np.zeros(p), np.ones(p), params, flags)


def _forest_settings(spec, p):
    frac = spec.get("max_features")
    mtry = max(1, int(round(math.sqrt(p)))) if frac is None else max(1, int(math.ceil(frac * p)))
    return dict(
        n_trees=int(spec.get("n_trees", 100)),
        max_depth=int(spec.get("max_depth", 5)),
        min_leaf=float(spec.get("min_leaf", 5)),
        mtry=min(mtry, p) if p else 1,
        bootstrap=bool(spec.get("bootstrap", 1)),
    )


def _fit_forest(spec, X, y, task, XE=None, eval_depths=()):
    pre = _trees.Presorted.from_matrix(X)
    trees, staged = _trees.fit_forest(
        pre, y, seed=spec.seed, XE=XE, eval_depths=eval_depths, **_forest_settings(spec, X.shape[1])
    )
    return {"trees": trees, "base": 0.0}, staged


def _fit_boosting(spec, X, y, task, XE=None, checkpoints=()):
    p = X.shape[1]
    frac = spec.get("max_features")
    mtry = p if frac is None else max(1, int(math.ceil(frac * p)))
    if task == "classification":
        ybar = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        base = math.log(ybar / (1 - ybar))
    else:
        base = float(y.mean())
    pre = _trees.Presorted.from_matrix(X)
    trees, staged = _trees.fit_boosting(
        pre,
        y,
        n_trees=int(spec.get("n_trees", 100)),
        lr=float(spec.get("learning_rate", 0.1)),
        max_depth=int(spec.get("max_depth", 2)),
        min_leaf=float(spec.get("min_leaf", 5)),
        mtry=mtry,
        subsample=float(spec.get("subsample", 1.0)),
        classification=task == "classification",
        base=base,
        seed=spec.seed,
        XE=XE,
        checkpoints=checkpoints,
    )
    return {"trees": trees, "base": base}, staged


def _finish_trees(kind, task, raw):
    if task == "classification":
        if kind == "gradient_boosting":
            raw = _linear.expit(raw)
        raw = np.clip(raw, PROB_CLAMP, 1 - PROB_CLAMP)
    return raw


def _linear_predictor(model: FittedLearner, X) -> np.ndarray:
    return model.params["intercept"] + X @ model.params["coef"]


def predict(model: FittedLearner, X) -> np.ndarray:
    """Predictions for ``X``; probabilities clamped to [1e-12, 1-1e-12]."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != model.n_features:
        raise ValueError(
            f"dimension mismatch: model expects {model.n_features} columns, got "
            f"{X.shape[1] if X.ndim == 2 else X.shape}"
        )
    if "constant" in model.params:
        out = np.full(X.shape[0], model.params["constant"])
    elif "coef" in model.params:
        out = _linear_predictor(model, X)
        if model.task == "classification":
            out = _linear.expit(out)
    else:
        out = model.params["base"] + _trees.ensemble_sum(model.params["trees"], X)
        return _finish_trees(model.spec.kind, model.task, out)
    if model.task == "classification":
        out = np.clip(out, PROB_CLAMP, 1 - PROB_CLAMP)
    return out


def _loss(metric, y, pred):
    if metric == "mse":
        return float(np.mean((y - pred) ** 2))
    if metric == "log_loss":
        p = np.clip(pred, 1e-12, 1 - 1e-12)
        return float(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
    raise ValueError(f"unknown metric {metric!r}")


def cv_folds(n: int, k: int, seed: int) -> list[np.ndarray]:
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(part) for part in np.array_split(perm, k)]


def tune(
    spec_grid: Sequence[LearnerSpec],
    X,
    y,
    k: int = 3,
    metric: str | None = None,
    seed: int = 0,
    task: str | None = None,
) -> LearnerSpec:
    """Grid member with the smallest k-fold cross-validated loss.

    Ties resolve to the earliest grid position.  ``task`` defaults from the
    metric (``log_loss`` -> classification).
    """
    grid = list(spec_grid)
    if not grid:
        raise ValueError("empty tuning grid")
    if len(grid) == 1:
        return grid[0]
    if k < 2:
        raise ValueError("k must be >= 2")
    if metric is None:
        metric = "log_loss" if task == "classification" else "mse"
    if task is None:
        task = "classification" if metric == "log_loss" else "regression"
    X, y = _check_xy(X, y, task)
    folds = cv_folds(X.shape[0], k, seed)
    staged_key = _staged_family(grid)
    preds = np.empty((len(grid), y.shape[0]))
    for held in folds:
        train = np.setdiff1d(np.arange(y.shape[0]), held, assume_unique=True)
        if staged_key is not None:
            preds[:, held] = _staged_predictions(grid, staged_key, X[train], y[train], X[held], task)
        else:
            for g, spec in enumerate(grid):
                model = fit_learner(spec, X[train], y[train], task)
                preds[g, held] = predict(model, X[held])
    best, best_loss = grid[0], math.inf
    for g, spec in enumerate(grid):
        loss = _loss(metric, y, preds[g])
        if loss < best_loss:
            best, best_loss = spec, loss
    return best


_STAGED = {"gradient_boosting": "n_trees", "random_forest": "max_depth"}


def _staged_family(grid):
    """Hyperparameter along which every grid member is a truncation of the largest.

    Applies when all members share kind, seed and every other hyperparameter.
    """
    kind = grid[0].kind
    key = _STAGED.get(kind)
    if key is None:
        return None
    rest0 = {k: v for k, v in grid[0].hyperparameters.items() if k != key}
    for g in grid:
        if g.kind != kind or g.seed != grid[0].seed or key not in g.hyperparameters:
            return None
        if {k: v for k, v in g.hyperparameters.items() if k != key} != rest0:
            return None
    return key


def _staged_predictions(grid, key, Xtr, ytr, Xev, task):
    """Held-out predictions of every grid member from one fit of the largest."""
    values = [int(g.get(key)) for g in grid]
    big = grid[int(np.argmax(values))]
    Xtr, ytr = _check_xy(Xtr, ytr, task)
    if task == "classification" and ytr.min() == ytr.max():
        return np.array([predict(fit_learner(g, Xtr, ytr, task), Xev) for g in grid])
    if big.kind == "random_forest":
        _, staged = _fit_forest(big, Xtr, ytr, task, XE=Xev, eval_depths=values)
        rows = staged
    else:
        _, staged = _fit_boosting(big, Xtr, ytr, task, XE=Xev, checkpoints=values)
        cps = sorted(set(values))
        rows = np.array([staged[cps.index(v)] for v in values])
    return np.array([_finish_trees(big.kind, task, r) for r in rows])


def kkt_check(model: FittedLearner, X, y) -> float:
    """Largest violation of the elastic-net stationarity conditions.

    Conditions are evaluated on the standardized scale the solver used:
    with ``g_j = x_j'r/n - lam(1-alpha) b_j``, active coordinates need
    ``g_j = lam*alpha*sign(b_j)`` and inactive ones ``|g_j| <= lam*alpha``.
    """
    if model.spec.kind != "elastic_net" or "coef" not in model.params:
        raise ValueError("kkt_check applies to fitted elastic_net models only")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    if X.shape[1] == 0:
        return 0.0
    lam, alpha = model.flags["lam"], model.flags["alpha"]
    Xs = (X - model.x_mean) / model.x_scale
    b = model.params["coef"] * model.x_scale
    eta = _linear_predictor(model, X)
    fitted = _linear.expit(eta) if model.task == "classification" else eta
    g = Xs.T @ (y - fitted) / X.shape[0] - lam * (1 - alpha) * b
    l1 = lam * alpha
    viol = np.where(b != 0, np.abs(g - l1 * np.sign(b)), np.maximum(0.0, np.abs(g) - l1))
    return float(viol.max())


def default_candidates(task: str) -> list[list[LearnerSpec]]:
    """The stock candidate set, one tuning grid per base learner.

    Grids stay small (two or three values of one hyperparameter) to bound
    Monte Carlo cost.  Boosting grids vary only ``n_trees`` so that tuning
    fits each grid once and scores its stages.  Depth-one boosting suits
    additive signals, depth two picks up pairwise interactions.
    """
    first = LearnerSpec("logistic" if task == "classification" else "linear")
    enet = [LearnerSpec("elastic_net", {"lam_ratio": r, "alpha": 0.5}) for r in (0.2, 0.05, 0.01)]
    forest = [
        LearnerSpec(
            "random_forest",
            {"n_trees": 50, "max_depth": d, "min_leaf": 5, "max_features": 0.33},
        )
        for d in (4, 8)
    ]

    def boost(depth, sizes):
        return [
            LearnerSpec(
                "gradient_boosting",
                {"n_trees": m, "learning_rate": 0.1, "max_depth": depth, "min_leaf": 5},
            )
            for m in sizes
        ]

    return [[first], enet, forest, boost(1, (100, 200, 400)), boost(2, (50, 100, 200))]


def _encode(v):
    if isinstance(v, np.ndarray):
        return {"__array__": v.tolist(), "dtype": str(v.dtype)}
    if isinstance(v, dict):
        return {k: _encode(x) for k, x in v.items()}
    if isinstance(v, (np.floating, np.integer, np.bool_)):
        return v.item()
    return v


def _decode(v):
    if isinstance(v, dict):
        if "__array__" in v:
            return np.asarray(v["__array__"], dtype=v["dtype"])
        return {k: _decode(x) for k, x in v.items()}
    return v


def learner_to_dict(model: FittedLearner) -> dict:
    """Versioned JSON-ready document of a fitted learner."""
    return {
        "format": "longicausal.learner",
        "version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "task": model.task,
        "n_features": model.n_features,
        "x_mean": _encode(model.x_mean),
        "x_scale": _encode(model.x_scale),
        "params": _encode(model.params),
        "flags": _encode(model.flags),
    }


def learner_from_dict(doc: Mapping) -> FittedLearner:
    if doc.get("format") != "longicausal.learner":
        raise ValueError("not a learner document")
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported learner document version {doc.get('version')}")
    return FittedLearner(
        LearnerSpec.from_dict(doc["spec"]),
        doc["task"],
        int(doc["n_features"]),
        _decode(doc["x_mean"]),
        _decode(doc["x_scale"]),
        _decode(doc["params"]),
        _decode(doc["flags"]),
    )


def dumps(model: FittedLearner) -> str:
    return json.dumps(learner_to_dict(model), sort_keys=True)
