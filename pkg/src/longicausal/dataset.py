"""Longitudinal data model: wide-CSV ingestion, validation, histories and folds.

A dataset holds, for ``n`` subjects observed at ``T`` visits, a binary
exposure ``A_t``, a covariate block ``Z_t`` (width may vary with ``t``), a
block of ``q`` continuous outcomes ``Y_t`` and an optional baseline block
``Z_0``.  Everything is immutable after validation.

Wide CSV schema
---------------
A schema maps every CSV column to one role::

    {"A_1": "exposure@1", "Z_1_1": "covariate@1", "Y_1_1": "outcome@1",
     "age": "baseline"}

Outcome columns are paired across visits by their order of appearance: the
j-th ``outcome@t`` column of every visit is outcome ``j``.
"""

from __future__ import annotations

import csv
import itertools
import json
import os
import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "DataValidationError",
    "LongitudinalDataset",
    "TreatmentRegime",
    "FoldSplit",
    "HistoryDesign",
    "load_wide_csv",
    "write_wide_csv",
    "build_history",
    "enumerate_regimes",
    "enumerate_suffixes",
    "split_folds",
]

_ROLE_RE = re.compile(r"^(exposure|covariate|outcome)@(\d+)$")


class DataValidationError(ValueError):
    """Raised when input data violate the dataset contract."""


def _frozen(a: np.ndarray, dtype) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class LongitudinalDataset:
    """Validated wide longitudinal data.

    Attributes
    ----------
    exposures : (n, T) int array of 0/1
    covariates : tuple of T arrays, the t-th of shape (n, p_t)
    outcomes : tuple of T arrays, each of shape (n, q)
    baseline : (n, p_0) array, possibly with zero columns
    """

    exposures: np.ndarray
    covariates: tuple
    outcomes: tuple
    baseline: np.ndarray = None
    covariate_names: tuple = None
    outcome_names: tuple = None
    baseline_names: tuple = None

    def __post_init__(self):
        A = np.asarray(self.exposures)
        if A.ndim != 2 or A.shape[1] < 1:
            raise DataValidationError("exposures must be an (n, T) matrix with T >= 1")
        n, T = A.shape
        if not np.all(np.isfinite(A.astype(float))):
            raise DataValidationError("missing exposure value")
        if not np.all((A == 0) | (A == 1)):
            raise DataValidationError("non-binary exposure")
        if len(self.covariates) != T or len(self.outcomes) != T:
            raise DataValidationError(
                f"expected {T} covariate and outcome blocks, got "
                f"{len(self.covariates)} and {len(self.outcomes)}"
            )
        covs = []
        for t, Z in enumerate(self.covariates, start=1):
            Z = np.asarray(Z, dtype=float)
            if Z.ndim == 1:
                Z = Z[:, None]
            if Z.shape[0] != n:
                raise DataValidationError(f"covariate block {t} has {Z.shape[0]} rows, expected {n}")
            if not np.all(np.isfinite(Z)):
                raise DataValidationError(f"missing covariate value at visit {t}")
            covs.append(_frozen(Z, float))
        outs = []
        for t, Y in enumerate(self.outcomes, start=1):
            Y = np.asarray(Y, dtype=float)
            if Y.ndim == 1:
                Y = Y[:, None]
            if Y.shape[0] != n:
                raise DataValidationError(f"outcome block {t} has {Y.shape[0]} rows, expected {n}")
            if not np.all(np.isfinite(Y)):
                raise DataValidationError(f"missing outcome value at visit {t}")
            outs.append(_frozen(Y, float))
        q = outs[0].shape[1]
        if q < 1 or any(Y.shape[1] != q for Y in outs):
            raise DataValidationError("every visit must carry the same number q >= 1 of outcomes")
        B = np.zeros((n, 0)) if self.baseline is None else np.asarray(self.baseline, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        if B.shape[0] != n:
            raise DataValidationError(f"baseline block has {B.shape[0]} rows, expected {n}")
        if not np.all(np.isfinite(B)):
            raise DataValidationError("missing baseline value")

        cnames = self.covariate_names
        if cnames is None:
            cnames = tuple(tuple(str(k) for k in range(Z.shape[1])) for Z in covs)
        cnames = tuple(tuple(c) for c in cnames)
        if len(cnames) != T or any(len(c) != Z.shape[1] for c, Z in zip(cnames, covs)):
            raise DataValidationError("covariate names do not match covariate blocks")
        onames = tuple(self.outcome_names) if self.outcome_names is not None else tuple(
            str(j) for j in range(q)
        )
        if len(onames) != q:
            raise DataValidationError("outcome names do not match q")
        bnames = tuple(self.baseline_names) if self.baseline_names is not None else tuple(
            str(k) for k in range(B.shape[1])
        )
        if len(bnames) != B.shape[1]:
            raise DataValidationError("baseline names do not match baseline block")

        object.__setattr__(self, "exposures", _frozen(A, np.int8))
        object.__setattr__(self, "covariates", tuple(covs))
        object.__setattr__(self, "outcomes", tuple(outs))
        object.__setattr__(self, "baseline", _frozen(B, float))
        object.__setattr__(self, "covariate_names", cnames)
        object.__setattr__(self, "outcome_names", onames)
        object.__setattr__(self, "baseline_names", bnames)

    @property
    def n_subjects(self) -> int:
        return self.exposures.shape[0]

    @property
    def n_timepoints(self) -> int:
        return self.exposures.shape[1]

    @property
    def p(self) -> tuple[int, ...]:
        return tuple(Z.shape[1] for Z in self.covariates)

    @property
    def q(self) -> int:
        return self.outcomes[0].shape[1]

    def outcome(self, t: int, j: int = 0) -> np.ndarray:
        """Outcome ``j`` at visit ``t`` (1-based visit index)."""
        return self.outcomes[t - 1][:, j]

    def subset(self, rows: Sequence[int]) -> "LongitudinalDataset":
        """Row subset (rows may repeat, as in a bootstrap resample)."""
        rows = np.asarray(rows, dtype=np.intp)
        return LongitudinalDataset(
            exposures=self.exposures[rows],
            covariates=tuple(Z[rows] for Z in self.covariates),
            outcomes=tuple(Y[rows] for Y in self.outcomes),
            baseline=self.baseline[rows],
            covariate_names=self.covariate_names,
            outcome_names=self.outcome_names,
            baseline_names=self.baseline_names,
        )


@dataclass(frozen=True)
class TreatmentRegime:
    """A binary treatment path ``(a_start, ..., a_T)``.

    ``start`` is the 1-based visit of the first entry; a full regime has
    ``start == 1``.
    """

    values: tuple[int, ...]
    start: int = 1

    def __post_init__(self):
        vals = tuple(int(v) for v in self.values)
        if any(v not in (0, 1) for v in vals):
            raise ValueError(f"regime entries must be 0/1, got {self.values}")
        if self.start < 1:
            raise ValueError("start must be >= 1")
        object.__setattr__(self, "values", vals)

    @property
    def end(self) -> int:
        return self.start + len(self.values) - 1

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self):
        return iter(self.values)

    def __getitem__(self, k):
        return self.values[k]


def enumerate_regimes(T: int) -> list[TreatmentRegime]:
    """All ``2**T`` full regimes in lexicographic order."""
    if T < 1:
        raise ValueError("T must be >= 1")
    return [TreatmentRegime(v, 1) for v in itertools.product((0, 1), repeat=T)]


def enumerate_suffixes(T: int, t: int) -> list[TreatmentRegime]:
    """All ``2**(T-t+1)`` suffixes ``(a_t, ..., a_T)`` in lexicographic order."""
    if not 1 <= t <= T:
        raise ValueError(f"t={t} out of range 1..{T}")
    return [TreatmentRegime(v, t) for v in itertools.product((0, 1), repeat=T - t + 1)]


@dataclass(frozen=True)
class FoldSplit:
    """Two disjoint subject index sets covering all subjects."""

    fold_a: np.ndarray
    fold_b: np.ndarray
    seed: int

    def __post_init__(self):
        a = _frozen(np.sort(np.asarray(self.fold_a)), np.intp)
        b = _frozen(np.sort(np.asarray(self.fold_b)), np.intp)
        if np.intersect1d(a, b).size:
            raise ValueError("folds overlap")
        if abs(a.size - b.size) > 1:
            raise ValueError("fold sizes differ by more than one")
        object.__setattr__(self, "fold_a", a)
        object.__setattr__(self, "fold_b", b)

    @property
    def n(self) -> int:
        return self.fold_a.size + self.fold_b.size

    def roles(self):
        """Yield ``(role, train_rows, held_out_rows)`` for both fold roles."""
        yield "a_trains", self.fold_a, self.fold_b
        yield "b_trains", self.fold_b, self.fold_a

    def membership(self) -> np.ndarray:
        """Per-subject fold label: 0 for fold a, 1 for fold b."""
        lab = np.empty(self.n, dtype=np.int8)
        lab[self.fold_a] = 0
        lab[self.fold_b] = 1
        return lab

    def __eq__(self, other):
        if not isinstance(other, FoldSplit):
            return NotImplemented
        return (
            np.array_equal(self.fold_a, other.fold_a)
            and np.array_equal(self.fold_b, other.fold_b)
        )

    __hash__ = None


def split_folds(ds: LongitudinalDataset | int, seed: int) -> FoldSplit:
    """Uniformly random halving of the subjects, deterministic per seed."""
    n = ds if isinstance(ds, (int, np.integer)) else ds.n_subjects
    if n < 4:
        raise ValueError(f"need at least 4 subjects to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    half = n // 2
    return FoldSplit(perm[:half], perm[half:], seed)


@dataclass(frozen=True)
class HistoryDesign:
    """Feature matrix for one visit plus column provenance labels."""

    matrix: np.ndarray
    labels: tuple[str, ...]
    t: int
    include_current_exposure: bool
    exposure_index: dict = field(default_factory=dict)

    def exposure_column(self, t: int) -> int:
        """Column holding ``A_t``."""
        try:
            return self.exposure_index[t]
        except KeyError:
            raise KeyError(f"A@{t} is not part of this history") from None

    def with_exposure(self, t: int, value: int, rows=None) -> np.ndarray:
        """Copy of the matrix (optionally a row subset) with ``A_t`` overridden."""
        X = self.matrix if rows is None else self.matrix[rows]
        X = np.array(X, copy=True)
        X[:, self.exposure_column(t)] = value
        return X


def build_history(
    ds: LongitudinalDataset, t: int, include_current_exposure: bool = False
) -> HistoryDesign:
    """History features available at visit ``t``.

    Columns are ordered: exposures ``A_1..A_{t-1}`` (plus ``A_t`` when
    requested), covariates ``Z_1..Z_t``, then lagged outcomes ``Y_1..Y_{t-1}``.
    """
    T = ds.n_timepoints
    if not 1 <= t <= T:
        raise ValueError(f"t={t} out of range 1..{T}")
    blocks, labels, expo = [], [], {}
    last_a = t if include_current_exposure else t - 1
    for k in range(1, last_a + 1):
        expo[k] = len(labels)
        blocks.append(ds.exposures[:, k - 1 : k].astype(float))
        labels.append(f"A@{k}")
    for k in range(1, t + 1):
        blocks.append(ds.covariates[k - 1])
        labels.extend(f"Z@{k}[{name}]" for name in ds.covariate_names[k - 1])
    for k in range(1, t):
        blocks.append(ds.outcomes[k - 1])
        if ds.q == 1:
            labels.append(f"Y@{k}")
        else:
            labels.extend(f"Y@{k}[{name}]" for name in ds.outcome_names)
    X = np.hstack(blocks) if blocks else np.zeros((ds.n_subjects, 0))
    X = np.ascontiguousarray(X, dtype=float)
    X.flags.writeable = False
    return HistoryDesign(X, tuple(labels), t, include_current_exposure, expo)


def _parse_schema(schema: Mapping[str, str] | str | os.PathLike) -> dict[str, str]:
    if isinstance(schema, (str, os.PathLike)):
        with open(schema, encoding="utf-8") as fh:
            schema = json.load(fh)
    if not isinstance(schema, Mapping):
        raise DataValidationError("schema must be a JSON object mapping column -> role")
    return {str(k): str(v) for k, v in schema.items()}


def load_wide_csv(path, schema) -> LongitudinalDataset:
    """Read a wide (one row per subject) CSV into a validated dataset.

    Parameters
    ----------
    path : path to a UTF-8 CSV with a header row.
    schema : mapping (or path to a JSON file) from column name to role, where
        role is ``exposure@t``, ``covariate@t``, ``outcome@t`` or ``baseline``.
    """
    if not os.path.isfile(path):
        raise DataValidationError(f"file not found: {path}")
    roles = _parse_schema(schema)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataValidationError(f"empty file: {path}") from None
        rows = [r for r in reader if r]
    header = [h.strip() for h in header]
    if len(set(header)) != len(header):
        raise DataValidationError("duplicate column names in header")
    for col in header:
        if col not in roles:
            raise DataValidationError(f"unmapped column: {col!r}")
    for col in roles:
        if col not in header:
            raise DataValidationError(f"schema column missing from file: {col!r}")

    expo: dict[int, str] = {}
    covs: dict[int, list[str]] = {}
    outs: dict[int, list[str]] = {}
    base: list[str] = []
    for col in header:
        role = roles[col]
        if role == "baseline":
            base.append(col)
            continue
        m = _ROLE_RE.match(role)
        if not m:
            raise DataValidationError(f"bad role {role!r} for column {col!r}")
        kind, t = m.group(1), int(m.group(2))
        if kind == "exposure":
            if t in expo:
                raise DataValidationError(f"two exposure columns for visit {t}")
            expo[t] = col
        elif kind == "covariate":
            covs.setdefault(t, []).append(col)
        else:
            outs.setdefault(t, []).append(col)
    if not expo:
        raise DataValidationError("schema declares no exposure columns")
    T = max(expo)
    for t in range(1, T + 1):
        if t not in expo:
            raise DataValidationError(f"no exposure column for visit {t}")
        if t not in outs:
            raise DataValidationError(f"no outcome column for visit {t}")
    if max(list(covs) + list(outs)) > T:
        raise DataValidationError("covariate/outcome visit beyond last exposure visit")

    col_idx = {c: i for i, c in enumerate(header)}
    n = len(rows)
    data = np.empty((n, len(header)))
    for r, row in enumerate(rows):
        if len(row) != len(header):
            raise DataValidationError(f"row {r + 2} has {len(row)} cells, expected {len(header)}")
        for c, cell in enumerate(row):
            cell = cell.strip()
            if cell == "" or cell.lower() in {"na", "nan", "null"}:
                raise DataValidationError(f"missing cell in column {header[c]!r}, row {r + 2}")
            try:
                data[r, c] = float(cell)
            except ValueError:
                raise DataValidationError(
                    f"non-numeric cell {cell!r} in column {header[c]!r}, row {r + 2}"
                ) from None
    A = np.column_stack([data[:, col_idx[expo[t]]] for t in range(1, T + 1)])
    bad = ~np.isin(A, (0.0, 1.0))
    if bad.any():
        t_bad = int(np.argwhere(bad)[0][1]) + 1
        raise DataValidationError(f"non-binary exposure in column {expo[t_bad]!r}")

    def block(cols):
        return data[:, [col_idx[c] for c in cols]] if cols else np.zeros((n, 0))

    q_names = outs[1]
    return LongitudinalDataset(
        exposures=A.astype(np.int8),
        covariates=tuple(block(covs.get(t, [])) for t in range(1, T + 1)),
        outcomes=tuple(block(outs[t]) for t in range(1, T + 1)),
        baseline=block(base),
        covariate_names=tuple(tuple(covs.get(t, [])) for t in range(1, T + 1)),
        outcome_names=tuple(q_names),
        baseline_names=tuple(base),
    )


def write_wide_csv(ds: LongitudinalDataset, path) -> dict[str, str]:
    """Write ``ds`` as a wide CSV and return the matching schema.

    Floats are written with ``repr`` so that reloading is bit-exact.
    """
    T = ds.n_timepoints
    cols: list[tuple[str, str, np.ndarray]] = []
    for t in range(1, T + 1):
        cols.append((f"A_{t}", f"exposure@{t}", ds.exposures[:, t - 1]))
    for t in range(1, T + 1):
        for k in range(ds.p[t - 1]):
            cols.append((f"Z_{t}_{k + 1}", f"covariate@{t}", ds.covariates[t - 1][:, k]))
    for t in range(1, T + 1):
        for j in range(ds.q):
            cols.append((f"Y_{t}_{j + 1}", f"outcome@{t}", ds.outcomes[t - 1][:, j]))
    for k in range(ds.baseline.shape[1]):
        cols.append((f"B_{k + 1}", "baseline", ds.baseline[:, k]))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([c[0] for c in cols])
        for i in range(ds.n_subjects):
            w.writerow(
                [str(int(v[i])) if role.startswith("exposure") else repr(float(v[i]))
                 for _, role, v in cols]
            )
    return {name: role for name, role, _ in cols}
