"""Cross-fitted nuisance sequences: propensity scores and iterated conditional means.

Fold roles follow one convention throughout.  Role ``"a_trains"`` fits base
learners on fold a and the meta model on fold b, and its predictions are the
ones used for fold-b subjects; ``"b_trains"`` is the mirror image.  So every
subject's nuisance values come from base learners that never saw that subject.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import FoldSplit, LongitudinalDataset, build_history, enumerate_suffixes
from .ensemble import StackedClassifier, StackedRegressor, derive_seed, fit_stacked
from .learners import default_candidates

__all__ = [
    "DEFAULT_TRIM",
    "PropensityFit",
    "IceStack",
    "fit_propensity",
    "cumulative_weights",
    "fit_ice",
    "eta_lookup",
    "write_diagnostics_csv",
]

DEFAULT_TRIM = (0.01, 0.99)
ROLES = ("a_trains", "b_trains")

# seed-derivation channels
_PS_CHANNEL = 1
_ICE_CHANNEL = 2


def _check_trim(trim):
    lo, hi = float(trim[0]), float(trim[1])
    if not 0.0 < lo < hi < 1.0:
        raise ValueError(f"trim bounds must satisfy 0 < lo < hi < 1, got {trim}")
    return lo, hi


def _source_roles(folds: FoldSplit | None, n: int) -> np.ndarray:
    """Role whose models produced each subject's values ("" when supplied)."""
    out = np.full(n, "", dtype=object)
    if folds is not None:
        out[folds.fold_b] = "a_trains"
        out[folds.fold_a] = "b_trains"
    return out


def _check_fold_sizes(folds: FoldSplit, k: int):
    smallest = min(folds.fold_a.size, folds.fold_b.size)
    if smallest < 2 * k:
        raise ValueError(
            f"fold of {smallest} subjects is too small for {k}-fold internal tuning"
        )


@dataclass
class PropensityFit:
    """Per-visit treatment probabilities for every subject.

    ``raw[i, t-1]`` is the model's P(A_t = 1 | history); ``prob`` is the same
    clipped to the trim bounds, and ``observed`` the trimmed probability of
    the arm each subject actually received.
    """

    raw: np.ndarray
    prob: np.ndarray
    observed: np.ndarray
    trim: tuple[float, float]
    folds: FoldSplit | None = None
    stacks: dict = field(default_factory=dict)
    source_role: np.ndarray | None = None
    flags: dict = field(default_factory=dict)

    @property
    def n_timepoints(self) -> int:
        return self.raw.shape[1]

    @classmethod
    def from_probabilities(
        cls, ds: LongitudinalDataset, p1, trim=DEFAULT_TRIM, folds: FoldSplit | None = None
    ) -> "PropensityFit":
        """Wrap externally supplied P(A_t = 1) values, shape ``(n, T)``.

        ``trim=None`` keeps the values as they are (they must lie in (0, 1)).
        """
        raw = np.array(p1, dtype=float, copy=True)
        if raw.shape != ds.exposures.shape:
            raise ValueError(f"expected shape {ds.exposures.shape}, got {raw.shape}")
        if trim is None:
            if np.any((raw <= 0) | (raw >= 1)):
                raise ValueError("untrimmed probabilities must lie strictly in (0, 1)")
            prob = raw.copy()
            trim_t = (0.0, 1.0)
        else:
            trim_t = _check_trim(trim)
            prob = np.clip(raw, *trim_t)
        A = ds.exposures
        observed = np.where(A == 1, prob, 1.0 - prob)
        return cls(raw, prob, observed, trim_t, folds, {}, _source_roles(folds, ds.n_subjects))

    def trim_hits(self) -> np.ndarray:
        """Per-visit count of raw probabilities outside the trim bounds."""
        lo, hi = self.trim
        return np.sum((self.raw < lo) | (self.raw > hi), axis=0)


def fit_propensity(
    ds: LongitudinalDataset,
    folds: FoldSplit,
    base_specs=None,
    trim=DEFAULT_TRIM,
    *,
    seed: int = 0,
    tune_folds: int = 3,
) -> PropensityFit:
    """Cross-fitted stacked classifiers for P(A_t = 1 | history), t = 1..T."""
    lo, hi = _check_trim(trim)
    _check_fold_sizes(folds, tune_folds)
    specs = default_candidates("classification") if base_specs is None else base_specs
    n, T = ds.exposures.shape
    raw = np.empty((n, T))
    stacks: dict = {}
    flags: dict = {"constant_exposure": [], "collinear": []}
    for t in range(1, T + 1):
        X = build_history(ds, t).matrix
        y = ds.exposures[:, t - 1].astype(float)
        for r, (role, tr, me) in enumerate(folds.roles()):
            if np.ptp(y[tr]) == 0:
                flags["constant_exposure"].append((t, role))
            st = fit_stacked(
                specs,
                (X[tr], y[tr]),
                (X[me], y[me]),
                "classification",
                seed=derive_seed(seed, _PS_CHANNEL, t, r),
                tune_folds=tune_folds,
                train_rows=tr,
                meta_rows=me,
            )
            if st.flags.get("collinear"):
                flags["collinear"].append((t, role))
            stacks[(t, role)] = st
            raw[me, t - 1] = st.predict(X[me])
    prob = np.clip(raw, lo, hi)
    observed = np.where(ds.exposures == 1, prob, 1.0 - prob)
    return PropensityFit(raw, prob, observed, (lo, hi), folds, stacks, _source_roles(folds, n), flags)


def cumulative_weights(pf: PropensityFit, upto: int) -> np.ndarray:
    """Inverse of the product of observed-arm probabilities over visits 1..upto."""
    if not 0 <= upto <= pf.n_timepoints:
        raise ValueError(f"upto={upto} out of range 0..{pf.n_timepoints}")
    return 1.0 / np.prod(pf.observed[:, :upto], axis=1)


@dataclass
class IceStack:
    """Counterfactual conditional-mean columns for one outcome.

    ``columns[t]`` maps a suffix ``(a_t, ..., a_T)`` to a length-n vector:
    the step-t conditional mean with visits t..T set to that suffix and
    earlier exposures left at their observed values.
    """

    n_timepoints: int
    columns: dict
    outcome_j: int = 0
    folds: FoldSplit | None = None
    stacks: dict = field(default_factory=dict)
    source_role: np.ndarray | None = None
    tuned_specs: dict = field(default_factory=dict)
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        T = self.n_timepoints
        if sorted(self.columns) != list(range(1, T + 1)):
            raise ValueError(f"need columns for steps 1..{T}")
        for t in range(1, T + 1):
            want = [s.values for s in enumerate_suffixes(T, t)]
            got = sorted(tuple(int(v) for v in k) for k in self.columns[t])
            if got != want:
                raise ValueError(f"step {t}: expected {len(want)} suffix columns, got {len(got)}")

    @classmethod
    def from_columns(
        cls, T: int, columns: Mapping[int, Mapping[Sequence[int], np.ndarray]], outcome_j: int = 0
    ) -> "IceStack":
        """Wrap externally supplied columns (e.g. analytic conditional means)."""
        cols = {
            int(t): {tuple(int(v) for v in k): np.asarray(v, dtype=float) for k, v in m.items()}
            for t, m in columns.items()
        }
        n = len(next(iter(cols[1].values())))
        return cls(T, cols, outcome_j, None, {}, _source_roles(None, n))

    def suffixes(self, t: int) -> list[tuple[int, ...]]:
        return [s.values for s in enumerate_suffixes(self.n_timepoints, t)]


def eta_lookup(stack: IceStack, t: int, suffix, subjects=None) -> np.ndarray:
    """Stored step-t column for ``suffix`` (length T - t + 1)."""
    T = stack.n_timepoints
    if not 1 <= t <= T:
        raise ValueError(f"t={t} out of range 1..{T}")
    key = tuple(int(v) for v in (suffix.values if hasattr(suffix, "values") else suffix))
    if len(key) != T - t + 1:
        raise ValueError(f"suffix at step {t} must have length {T - t + 1}, got {len(key)}")
    try:
        col = stack.columns[t][key]
    except KeyError:
        raise KeyError(f"unknown suffix {key} at step {t}") from None
    return col if subjects is None else col[np.asarray(subjects)]


def fit_ice(
    ds: LongitudinalDataset,
    folds: FoldSplit,
    base_specs=None,
    outcome_j: int = 0,
    *,
    seed: int = 0,
    tune_folds: int = 3,
    retune_per_suffix: bool = False,
) -> IceStack:
    """Backward recursion of stacked regressions with counterfactual overrides.

    Step T regresses Y_T on the full history including A_T.  Step t < T
    regresses each step-(t+1) column on the history including A_t.  Each
    regression is predicted on the held-out fold with A_t set to 0 and to 1.
    Tuning runs once per (step, role) and the chosen hyperparameters are
    reused for the remaining suffixes unless ``retune_per_suffix``.
    """
    if not 0 <= outcome_j < ds.q:
        raise ValueError(f"outcome index {outcome_j} out of range 0..{ds.q - 1}")
    _check_fold_sizes(folds, tune_folds)
    specs = default_candidates("regression") if base_specs is None else base_specs
    n, T = ds.exposures.shape
    columns: dict = {}
    stacks: dict = {}
    tuned_specs: dict = {}
    flags: dict = {"collinear": []}
    for t in range(T, 0, -1):
        hist = build_history(ds, t, include_current_exposure=True)
        X = hist.matrix
        X0 = hist.with_exposure(t, 0)
        X1 = hist.with_exposure(t, 1)
        if t == T:
            targets = {(): ds.outcome(T, outcome_j)}
        else:
            targets = dict(columns[t + 1])
        step_cols = {}
        for r, (role, tr, me) in enumerate(folds.roles()):
            chosen = None
            for s, (tail, y) in enumerate(targets.items()):
                if not np.all(np.isfinite(y)):
                    raise AssertionError(f"non-finite pseudo-outcome at step {t + 1}")
                st = fit_stacked(
                    specs,
                    (X[tr], y[tr]),
                    (X[me], y[me]),
                    "regression",
                    seed=derive_seed(seed, _ICE_CHANNEL, outcome_j, t, r, s),
                    tune_folds=tune_folds,
                    tuned=None if (retune_per_suffix or chosen is None) else chosen,
                    train_rows=tr,
                    meta_rows=me,
                )
                if chosen is None:
                    chosen = st.chosen_specs
                    tuned_specs[(t, role)] = chosen
                if st.flags.get("collinear"):
                    flags["collinear"].append((t, role, tail))
                stacks[(t, role, tail)] = st
                for a, Xa in ((0, X0), (1, X1)):
                    key = (a,) + tail
                    col = step_cols.setdefault(key, np.full(n, np.nan))
                    col[me] = st.predict(Xa[me])
        expected = 2 ** (T - t + 1)
        if len(step_cols) != expected:
            raise AssertionError(f"step {t}: {len(step_cols)} columns, expected {expected}")
        columns[t] = step_cols
    return IceStack(T, columns, outcome_j, folds, stacks, _source_roles(folds, n), tuned_specs, flags)


def write_diagnostics_csv(path, pf: PropensityFit, ice: IceStack | None = None):
    """Per-subject PS, cumulative weights and (optionally) ICE columns."""
    n, T = pf.raw.shape
    header = ["subject", "source_role"]
    cols = []
    for t in range(1, T + 1):
        header += [f"ps_raw@{t}", f"ps@{t}", f"ps_observed@{t}", f"weight@{t}"]
        cols += [pf.raw[:, t - 1], pf.prob[:, t - 1], pf.observed[:, t - 1], cumulative_weights(pf, t)]
    if ice is not None:
        for t in range(1, T + 1):
            for key in ice.suffixes(t):
                header.append(f"eta@{t}[{''.join(map(str, key))}]")
                cols.append(ice.columns[t][key])
    roles = pf.source_role if pf.source_role is not None else np.full(n, "", dtype=object)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(n):
            w.writerow([i, roles[i]] + [f"{c[i]:.6g}" for c in cols])
