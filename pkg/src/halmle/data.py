"""Dataset container, CSV input/output, fold plans and bootstrap resampling."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np


class DataError(ValueError):
    """Raised when a file or array cannot be turned into a valid Dataset."""


CONTINUOUS = "continuous"
BINARY = "binary"


@dataclass(frozen=True)
class Dataset:
    """Observations O = (W, A, Y).

    ``W`` is n x d, ``A`` is an optional 0/1 vector and ``Y`` is the outcome.
    Arrays are made read-only on construction so the object can be shared
    between workers.
    """

    W: np.ndarray
    Y: np.ndarray
    A: np.ndarray | None = None
    outcome_kind: str = CONTINUOUS
    covariate_names: tuple[str, ...] = ()
    treatment_name: str | None = None
    outcome_name: str = "y"

    def __post_init__(self):
        W = np.asarray(self.W, dtype=float)
        if W.ndim == 1:
            W = W[:, None]
        Y = np.asarray(self.Y, dtype=float).ravel()
        if W.ndim != 2 or W.shape[0] < 1 or W.shape[1] < 1:
            raise DataError("W must be a nonempty n x d matrix")
        n = W.shape[0]
        if Y.shape[0] != n:
            raise DataError(f"Y has {Y.shape[0]} rows, W has {n}")
        if not np.all(np.isfinite(W)) or not np.all(np.isfinite(Y)):
            raise DataError("missing or non-finite values are not allowed")
        if self.outcome_kind not in (CONTINUOUS, BINARY):
            raise DataError(f"unknown outcome_kind {self.outcome_kind!r}")
        if self.outcome_kind == BINARY and not np.all((Y == 0) | (Y == 1)):
            raise DataError("binary outcome must take values in {0,1}")
        A = self.A
        if A is not None:
            A = np.asarray(A, dtype=float).ravel()
            if A.shape[0] != n:
                raise DataError(f"A has {A.shape[0]} rows, W has {n}")
            if not np.all((A == 0) | (A == 1)):
                raise DataError("treatment must take values in {0,1}")
            A.setflags(write=False)
        names = tuple(self.covariate_names) or tuple(f"w{j + 1}" for j in range(W.shape[1]))
        if len(names) != W.shape[1]:
            raise DataError("covariate_names length does not match W")
        W.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "covariate_names", names)
        if A is not None and self.treatment_name is None:
            object.__setattr__(self, "treatment_name", "a")

    @property
    def n(self) -> int:
        return self.W.shape[0]

    @property
    def d(self) -> int:
        return self.W.shape[1]

    @property
    def has_treatment(self) -> bool:
        return self.A is not None

    @property
    def column_names(self) -> tuple[str, ...]:
        tr = (self.treatment_name,) if self.has_treatment else ()
        return self.covariate_names + tr + (self.outcome_name,)

    def features(self, treatment: float | None = None, include_treatment: bool = True) -> np.ndarray:
        """Regression inputs x = (A, W); ``treatment`` overrides A (counterfactual)."""
        if not include_treatment or not self.has_treatment:
            return np.array(self.W)
        a = self.A if treatment is None else np.full(self.n, float(treatment))
        return np.column_stack([a, self.W])

    def feature_names(self, include_treatment: bool = True) -> tuple[str, ...]:
        if include_treatment and self.has_treatment:
            return (self.treatment_name,) + self.covariate_names
        return self.covariate_names

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            W=self.W[idx],
            Y=self.Y[idx],
            A=None if self.A is None else self.A[idx],
            outcome_kind=self.outcome_kind,
            covariate_names=self.covariate_names,
            treatment_name=self.treatment_name,
            outcome_name=self.outcome_name,
        )


@dataclass(frozen=True)
class FoldPlan:
    """V-fold assignment with fold ids in 1..V."""

    V: int
    assignment: np.ndarray
    seed: int

    def __post_init__(self):
        a = np.asarray(self.assignment, dtype=int)
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)

    def validation(self, v: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == v)

    def training(self, v: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != v)

    def splits(self):
        for v in range(1, self.V + 1):
            yield v, self.training(v), self.validation(v)


def _parse_cell(text: str, row: int, col: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"row {row}, column {col!r}: cannot parse {text!r} as a number") from None
    if not np.isfinite(value):
        raise DataError(f"row {row}, column {col!r}: non-finite value {text!r}")
    return value


def load_csv(path, roles: Mapping, outcome_kind: str = CONTINUOUS) -> Dataset:
    """Read a comma-separated file with a header row.

    ``roles`` maps ``"W"`` to a list of covariate columns, ``"Y"`` to the
    outcome column and optionally ``"A"`` to the treatment column. Row numbers
    in error messages count data rows from 1.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"data file not found: {path}")
    w_cols = roles.get("W")
    y_col = roles.get("Y")
    a_col = roles.get("A")
    if not y_col:
        raise DataError("roles must name exactly one outcome column (Y)")
    if isinstance(y_col, (list, tuple)):
        if len(y_col) != 1:
            raise DataError("roles must name exactly one outcome column (Y)")
        y_col = y_col[0]
    if isinstance(w_cols, str):
        w_cols = [w_cols]
    if not w_cols:
        raise DataError("roles must name at least one covariate column (W)")
    if isinstance(a_col, (list, tuple)):
        a_col = a_col[0] if a_col else None

    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path} is empty") from None
        wanted = list(w_cols) + ([a_col] if a_col else []) + [y_col]
        missing = [c for c in wanted if c not in header]
        if missing:
            raise DataError(f"columns not in header: {missing}")
        pos = {c: header.index(c) for c in wanted}
        rows = []
        for r, rec in enumerate(reader, start=1):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(header):
                raise DataError(f"row {r}: expected {len(header)} fields, got {len(rec)}")
            rows.append([_parse_cell(rec[pos[c]].strip(), r, c) for c in wanted])
    if not rows:
        raise DataError(f"{path} has no data rows")
    M = np.array(rows, dtype=float)
    d = len(w_cols)
    W = M[:, :d]
    A = M[:, d] if a_col else None
    Y = M[:, -1]
    if A is not None:
        bad = np.flatnonzero((A != 0) & (A != 1))
        if bad.size:
            raise DataError(f"row {bad[0] + 1}, column {a_col!r}: treatment value {A[bad[0]]:g} not in {{0,1}}")
    if outcome_kind == BINARY:
        bad = np.flatnonzero((Y != 0) & (Y != 1))
        if bad.size:
            raise DataError(f"row {bad[0] + 1}, column {y_col!r}: binary outcome value {Y[bad[0]]:g} not in {{0,1}}")
    return Dataset(W=W, Y=Y, A=A, outcome_kind=outcome_kind, covariate_names=tuple(w_cols),
                   treatment_name=a_col, outcome_name=y_col)


def write_csv(dataset: Dataset, path) -> None:
    """Write ``dataset`` using shortest round-trip float formatting."""
    cols = [dataset.W]
    if dataset.has_treatment:
        cols.append(dataset.A[:, None])
    cols.append(dataset.Y[:, None])
    M = np.hstack(cols)
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(dataset.column_names)
        for row in M:
            writer.writerow([repr(float(v)) for v in row])


def make_folds(dataset: Dataset | int, V: int, seed: int) -> FoldPlan:
    """Seeded shuffle followed by a block split into V balanced folds."""
    n = dataset if isinstance(dataset, int) else dataset.n
    if not 2 <= V <= n:
        raise ValueError(f"fold count V={V} must satisfy 2 <= V <= n={n}")
    perm = np.random.default_rng(seed).permutation(n)
    assignment = np.empty(n, dtype=int)
    for v, block in enumerate(np.array_split(perm, V), start=1):
        assignment[block] = v
    return FoldPlan(V=V, assignment=assignment, seed=seed)


def resample_indices(n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise DataError("cannot resample an empty dataset")
    return np.random.default_rng(seed).integers(0, n, size=n)


def resample(dataset: Dataset, seed: int) -> Dataset:
    """Nonparametric bootstrap draw: n rows uniformly with replacement."""
    return dataset.take(resample_indices(dataset.n, seed))
