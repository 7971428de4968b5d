"""Data model: patients, practices, target profiles and null covariates."""

from __future__ import annotations

import enum
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EmptyDataset,
    EmptyPractice,
    MissingColumn,
    NonBinaryValueInBinaryColumn,
    ColumnMismatch,
)

CONTINUOUS = "continuous"
BINARY = "binary"
KINDS = (CONTINUOUS, BINARY)

NULL_TOL = 1e-9


class ExtrapolationStatus(enum.Enum):
    INTERPOLATED = "interpolated"
    EXTRAPOLATED = "extrapolated"
    INFEASIBLE = "infeasible"

    @property
    def code(self) -> int:
        return _STATUS_CODES[self]

    @classmethod
    def from_code(cls, code: int) -> "ExtrapolationStatus":
        return _CODE_STATUSES[int(code)]


_STATUS_CODES = {
    ExtrapolationStatus.INTERPOLATED: 0,
    ExtrapolationStatus.EXTRAPOLATED: 1,
    ExtrapolationStatus.INFEASIBLE: 2,
}
_CODE_STATUSES = {v: k for k, v in _STATUS_CODES.items()}


class Basis(enum.Enum):
    RAW = "RawCovariates"
    TRANSFORMED = "Transformed"


class Provenance(enum.Enum):
    SYSTEM_MEAN = "SystemMean"
    TARGET_SAMPLE_MEAN = "TargetSampleMean"
    SINGLE_PATIENT = "SinglePatient"
    CUSTOM = "Custom"


def _readonly(a):
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


def _sort_key(label):
    # numeric labels sort numerically, everything else lexically after them
    try:
        return (0, float(label), "")
    except (TypeError, ValueError):
        return (1, 0.0, str(label))


@dataclass(frozen=True, eq=False)
class Dataset:
    """Patient-level table with practice bookkeeping.

    ``assignment`` holds dense practice indices ``1..P``; ``practice_labels[p - 1]``
    is the original identifier of practice ``p``.
    """

    covariates: np.ndarray
    names: tuple
    kinds: tuple
    assignment: np.ndarray
    practice_labels: tuple
    outcome: np.ndarray | None = None
    patient_ids: tuple | None = None
    practice_index: tuple = field(init=False, repr=False)

    def __post_init__(self):
        X = np.asarray(self.covariates, dtype=float)
        if X.ndim != 2:
            raise ValueError("covariates must be a 2-d matrix")
        n, K = X.shape
        if len(self.names) != K or len(self.kinds) != K:
            raise ColumnMismatch("names/kinds do not match the covariate matrix")
        if len(set(self.names)) != K:
            raise ColumnMismatch("covariate names must be unique")
        for kind in self.kinds:
            if kind not in KINDS:
                raise ValueError(f"unknown column kind {kind!r}")
        if not np.all(np.isfinite(X)):
            raise ValueError("covariates contain missing or non-finite values")
        for j, kind in enumerate(self.kinds):
            if kind == BINARY and not np.all((X[:, j] == 0) | (X[:, j] == 1)):
                raise NonBinaryValueInBinaryColumn(self.names[j])
        a = np.asarray(self.assignment)
        if a.shape != (n,):
            raise ValueError("assignment must have one entry per row")
        P = len(self.practice_labels)
        a = a.astype(np.int64)
        if n and (a.min() < 1 or a.max() > P):
            raise ValueError("assignment must lie in 1..P")
        order = np.argsort(a, kind="stable")
        bounds = np.searchsorted(a[order], np.arange(1, P + 2))
        index = tuple(_readonly(order[bounds[p]:bounds[p + 1]]) for p in range(P))
        for p, rows in enumerate(index):
            if rows.size == 0:
                raise EmptyPractice(f"practice {self.practice_labels[p]!r} has no patients")
        y = None
        if self.outcome is not None:
            y = np.asarray(self.outcome, dtype=float)
            if y.shape != (n,):
                raise ValueError("outcome must have one entry per row")
            y = _readonly(y)
        object.__setattr__(self, "covariates", _readonly(X))
        object.__setattr__(self, "assignment", _readonly(a))
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "kinds", tuple(self.kinds))
        object.__setattr__(self, "practice_labels", tuple(self.practice_labels))
        object.__setattr__(self, "outcome", y)
        if self.patient_ids is not None:
            object.__setattr__(self, "patient_ids", tuple(self.patient_ids))
        object.__setattr__(self, "practice_index", index)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    @property
    def K(self) -> int:
        return self.covariates.shape[1]

    @property
    def P(self) -> int:
        return len(self.practice_labels)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([rows.size for rows in self.practice_index])

    @property
    def codes(self) -> np.ndarray:
        """Zero-based practice index per row."""
        return self.assignment - 1

    def rows_of(self, p: int) -> np.ndarray:
        """Row indices of dense practice ``p`` (1-based)."""
        return self.practice_index[p - 1]

    def subset(self, rows) -> "Dataset":
        """Dataset restricted to ``rows``; practice indices are re-densified."""
        rows = np.asarray(rows)
        kept = np.unique(self.assignment[rows])
        remap = np.zeros(self.P + 1, dtype=np.int64)
        remap[kept] = np.arange(1, kept.size + 1)
        return Dataset(
            covariates=self.covariates[rows],
            names=self.names,
            kinds=self.kinds,
            assignment=remap[self.assignment[rows]],
            practice_labels=tuple(self.practice_labels[k - 1] for k in kept),
            outcome=None if self.outcome is None else self.outcome[rows],
            patient_ids=None if self.patient_ids is None
            else tuple(self.patient_ids[i] for i in rows),
        )

    def with_outcome(self, y) -> "Dataset":
        return Dataset(self.covariates, self.names, self.kinds, self.assignment,
                       self.practice_labels, y, self.patient_ids)


def build_dataset(rows, kinds: Mapping[str, str], *, practice: str = "practice_id",
                  outcome: str | None = None, patient: str | None = "patient_id") -> Dataset:
    """Build a :class:`Dataset` from a column mapping (dict of columns or DataFrame).

    ``kinds`` maps covariate name to ``"continuous"`` or ``"binary"`` and fixes the
    column order. Practices are ordered by ascending original id.
    """
    def column(name):
        try:
            return np.asarray(rows[name])
        except (KeyError, IndexError):
            raise MissingColumn(name) from None

    labels = column(practice)
    n = labels.shape[0]
    names = tuple(kinds)
    X = np.empty((n, len(names)))
    for j, name in enumerate(names):
        X[:, j] = column(name).astype(float)
    uniq = sorted(set(labels.tolist()), key=_sort_key)
    dense = {lab: p for p, lab in enumerate(uniq, start=1)}
    assignment = np.array([dense[lab] for lab in labels.tolist()], dtype=np.int64)
    y = column(outcome).astype(float) if outcome is not None else None
    pids = None
    if patient is not None:
        try:
            pids = tuple(np.asarray(rows[patient]).tolist())
        except (KeyError, IndexError):
            pids = None
    return Dataset(X, names, tuple(kinds[nm] for nm in names), assignment, tuple(uniq), y, pids)


def from_arrays(X, assignment, outcome=None, names=None, kinds=None) -> Dataset:
    """Convenience constructor from a matrix and arbitrary practice labels."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    K = X.shape[1]
    names = tuple(names) if names is not None else tuple(f"X{j + 1}" for j in range(K))
    if kinds is None:
        kinds = tuple(BINARY if np.all((X[:, j] == 0) | (X[:, j] == 1)) and X.shape[0] > 1
                      else CONTINUOUS for j in range(K))
    # keep the caller's label objects; np.asarray would turn mixed labels into strings
    labels = assignment.tolist() if isinstance(assignment, np.ndarray) else list(assignment)
    uniq = sorted(set(labels), key=_sort_key)
    dense = {lab: p for p, lab in enumerate(uniq, start=1)}
    a = np.array([dense[lab] for lab in labels], dtype=np.int64)
    return Dataset(X, names, tuple(kinds), a, tuple(uniq), outcome)


@dataclass(frozen=True, eq=False)
class Profile:
    """Target vector over named balance functions.

    ``rows`` is set for target-sample profiles (row indices of the referenced
    dataset) and ``point`` for single-patient profiles (the raw covariate row).
    """

    name: str
    values: np.ndarray
    names: tuple
    basis: Basis = Basis.RAW
    provenance: Provenance = Provenance.CUSTOM
    rows: np.ndarray | None = None
    point: np.ndarray | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float).ravel()
        if v.size != len(self.names):
            raise ColumnMismatch("profile values and names differ in length")
        if len(set(self.names)) != len(self.names):
            raise ColumnMismatch("profile names must be unique")
        object.__setattr__(self, "values", _readonly(v))
        object.__setattr__(self, "names", tuple(self.names))

    def __getitem__(self, name):
        return float(self.values[self.names.index(name)])

    def as_dict(self) -> dict:
        return dict(zip(self.names, self.values.tolist()))

    def aligned(self, names: Sequence[str]) -> np.ndarray:
        """Values reordered to ``names``; every name must be present exactly once."""
        if sorted(names) != sorted(self.names):
            missing = set(names) ^ set(self.names)
            raise ColumnMismatch(f"profile does not match balance functions: {sorted(missing)}")
        lookup = dict(zip(self.names, self.values))
        return np.array([lookup[nm] for nm in names])

    def validate(self, d: Dataset) -> "Profile":
        values = self.aligned(d.names) if self.basis is Basis.RAW else self.values
        if self.basis is Basis.RAW:
            for nm, kind, v in zip(d.names, d.kinds, values):
                if kind == BINARY and not (0.0 <= v <= 1.0):
                    raise ValueError(f"profile value for binary covariate {nm!r} outside [0, 1]")
        return self


def system_profile(d: Dataset, basis: Basis = Basis.RAW, name: str = "System") -> Profile:
    """Mean profile over every patient in ``d``."""
    if d.n == 0:
        raise EmptyDataset("cannot build a system profile from an empty dataset")
    if basis is not Basis.RAW:
        raise ValueError("transformed system profiles are built by transform.profile_values")
    return Profile(name, d.covariates.mean(axis=0), d.names, Basis.RAW,
                   Provenance.SYSTEM_MEAN, rows=np.arange(d.n))


def target_sample_profile(d: Dataset, rows, name: str = "Target") -> Profile:
    rows = np.asarray(rows)
    if rows.size == 0:
        raise EmptyDataset("target sample is empty")
    return Profile(name, d.covariates[rows].mean(axis=0), d.names, Basis.RAW,
                   Provenance.TARGET_SAMPLE_MEAN, rows=rows)


def patient_profile(d: Dataset, row: int, name: str | None = None) -> Profile:
    x = d.covariates[row]
    return Profile(name or f"patient{row}", x, d.names, Basis.RAW,
                   Provenance.SINGLE_PATIENT, point=x.copy())


@dataclass(frozen=True)
class NullPartition:
    """Per practice, the covariates held constant at a value away from the profile."""

    names: tuple
    null_sets: tuple           # per practice: tuple of names
    constants: tuple           # per practice: dict name -> constant value
    practice_labels: tuple

    def nonnull_set(self, p: int) -> tuple:
        null = set(self.null_sets[p - 1])
        return tuple(nm for nm in self.names if nm not in null)

    def null_set(self, p: int) -> tuple:
        return self.null_sets[p - 1]

    @property
    def census(self) -> dict:
        """Number of practices in which each covariate is null."""
        counts = dict.fromkeys(self.names, 0)
        for nulls in self.null_sets:
            for nm in nulls:
                counts[nm] += 1
        return counts

    @property
    def n_pairs(self) -> int:
        return sum(len(s) for s in self.null_sets)

    @property
    def any_null(self) -> tuple:
        """Names null in at least one practice, in column order."""
        hit = set().union(*map(set, self.null_sets)) if self.null_sets else set()
        return tuple(nm for nm in self.names if nm in hit)

    def practices_with_nulls(self) -> int:
        return sum(1 for s in self.null_sets if s)


def scaled_tolerances(B: np.ndarray, kinds: Sequence[str], tol: float = NULL_TOL) -> np.ndarray:
    """Absolute tolerance for binary columns, ``tol`` times the column sd otherwise."""
    sd = B.std(axis=0) if B.shape[0] else np.zeros(B.shape[1])
    return np.array([tol if k == BINARY else tol * s for k, s in zip(kinds, sd)])


def null_columns(B: np.ndarray, target: np.ndarray, groups: Sequence[np.ndarray],
                 tols: np.ndarray) -> list:
    """Boolean null mask per group of rows of an arbitrary balance matrix."""
    out = []
    for rows in groups:
        Bp = B[rows]
        lo, hi = Bp.min(axis=0), Bp.max(axis=0)
        const = (hi - lo) <= tols
        out.append(const & (np.abs(Bp[0] - target) > tols))
    return out


def detect_null_covariates(d: Dataset, profile: Profile, tol: float = NULL_TOL) -> NullPartition:
    """Partition every practice's covariates into null and non-null sets."""
    if profile.basis is not Basis.RAW:
        raise ValueError("null detection needs a profile over raw covariates")
    target = profile.aligned(d.names)
    tols = scaled_tolerances(d.covariates, d.kinds, tol)
    masks = null_columns(d.covariates, target, d.practice_index, tols)
    null_sets, constants = [], []
    for rows, mask in zip(d.practice_index, masks):
        js = np.flatnonzero(mask)
        null_sets.append(tuple(d.names[j] for j in js))
        constants.append({d.names[j]: float(d.covariates[rows[0], j]) for j in js})
    return NullPartition(d.names, tuple(null_sets), tuple(constants), d.practice_labels)
