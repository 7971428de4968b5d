"""Balance-function bases: raw covariates and principal-component expansions."""

from __future__ import annotations

import enum
import warnings
from dataclasses import dataclass

import numpy as np

from .core import Basis, Dataset, Profile, Provenance
from .errors import ColumnMismatch, DegenerateCovariance, TooFewRows

DEFAULT_THRESHOLD = 0.8


class TransformMode(enum.Enum):
    RAW = "Raw"
    PC_AUGMENTED = "PcAugmented"
    PC_SECOND_MOMENT = "PcSecondMoment"


@dataclass(frozen=True, eq=False)
class Transform:
    """A fitted mapping from raw covariates to balance functions.

    PCA runs on standardized covariates; ``pca_columns`` indexes the raw columns
    that entered it (zero-variance columns are left out).
    """

    names: tuple
    mode: TransformMode
    threshold: float
    mean: np.ndarray
    sd: np.ndarray
    pca_columns: np.ndarray
    loadings: np.ndarray          # (len(pca_columns), m)
    explained: np.ndarray         # explained-variance ratio of every component
    max_moment_components: int | None = None

    @property
    def m(self) -> int:
        return self.loadings.shape[1]

    @property
    def moment_components(self) -> int:
        q = self.m
        return q if self.max_moment_components is None else min(q, self.max_moment_components)

    def scores(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=float))
        cols = self.pca_columns
        Z = (X[:, cols] - self.mean[cols]) / self.sd[cols]
        return Z @ self.loadings

    @property
    def output_names(self) -> tuple:
        names = list(self.names)
        if self.mode is TransformMode.RAW:
            return tuple(names)
        names += [f"PC{j + 1}" for j in range(self.m)]
        if self.mode is TransformMode.PC_SECOND_MOMENT:
            q = self.moment_components
            for j in range(q):
                for k in range(j, q):
                    names.append(f"PC{j + 1}^2" if j == k else f"PC{j + 1}*PC{k + 1}")
        return tuple(names)

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Balance functions for raw covariate rows ``X``."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        if X.shape[1] != len(self.names):
            raise ColumnMismatch("row width does not match the fitted columns")
        if self.mode is TransformMode.RAW:
            return X.copy()
        S = self.scores(X)
        parts = [X, S]
        if self.mode is TransformMode.PC_SECOND_MOMENT:
            q = self.moment_components
            j, k = np.triu_indices(q)
            parts.append(S[:, j] * S[:, k])
        return np.hstack(parts)


def raw_transform(d: Dataset) -> Transform:
    K = d.K
    return Transform(d.names, TransformMode.RAW, DEFAULT_THRESHOLD, d.covariates.mean(axis=0),
                     np.ones(K), np.arange(0), np.zeros((0, 0)), np.zeros(0))


def _orient(vectors: np.ndarray) -> np.ndarray:
    # largest-magnitude entry of each loading vector made positive
    idx = np.argmax(np.abs(vectors), axis=0)
    signs = np.sign(vectors[idx, np.arange(vectors.shape[1])])
    signs[signs == 0] = 1.0
    return vectors * signs


def fit_transform(d: Dataset, mode: TransformMode = TransformMode.PC_SECOND_MOMENT,
                  threshold: float = DEFAULT_THRESHOLD,
                  max_moment_components: int | None = None) -> Transform:
    """Fit the standardization and PCA behind the transformed basis."""
    if isinstance(mode, str):
        mode = TransformMode(mode)
    if mode is TransformMode.RAW:
        return raw_transform(d)
    if not 0.0 < threshold <= 1.0:
        raise ValueError("variance threshold must lie in (0, 1]")
    X = d.covariates
    n, K = X.shape
    if n <= K:
        raise TooFewRows(f"need more rows than covariates (n={n}, K={K})")
    mean = X.mean(axis=0)
    sd = X.std(axis=0, ddof=1)
    keep = np.flatnonzero(sd > 0)
    if keep.size == 0:
        raise DegenerateCovariance("every covariate has zero variance")
    if keep.size < K:
        dropped = [d.names[j] for j in np.flatnonzero(sd <= 0)]
        warnings.warn(f"zero-variance columns left out of PCA: {dropped}", stacklevel=2)
    safe_sd = np.where(sd > 0, sd, 1.0)
    Z = (X[:, keep] - mean[keep]) / safe_sd[keep]
    corr = Z.T @ Z / (n - 1)
    evals, evecs = np.linalg.eigh(corr)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    if total <= 0:
        raise DegenerateCovariance("covariance matrix has rank 0")
    ratios = evals / total
    cum = np.cumsum(ratios)
    m = int(np.searchsorted(cum, threshold - 1e-10) + 1)
    m = min(m, keep.size)
    loadings = _orient(evecs[:, :m])
    return Transform(d.names, mode, float(threshold), mean, safe_sd, keep, loadings, ratios,
                     max_moment_components)


def balance_functions(d: Dataset, t: Transform) -> tuple[np.ndarray, tuple]:
    """Balance matrix ``B`` (n x L) and its column names."""
    if tuple(d.names) != tuple(t.names):
        raise ColumnMismatch("dataset columns differ from the fitted transform")
    return t.apply(d.covariates), t.output_names


def profile_values(profile: Profile, d: Dataset, t: Transform,
                   B: np.ndarray | None = None) -> Profile:
    """Express a raw-covariate profile over the balance functions of ``t``.

    Target-sample profiles average the mapped rows; single-patient and custom
    profiles map their one point.
    """
    if profile.basis is Basis.TRANSFORMED:
        if tuple(profile.names) != t.output_names:
            raise ColumnMismatch("transformed profile does not match the transform")
        return profile
    if t.mode is TransformMode.RAW:
        return Profile(profile.name, profile.aligned(d.names), d.names, Basis.RAW,
                       profile.provenance, profile.rows, profile.point)
    if profile.rows is not None and profile.provenance in (Provenance.SYSTEM_MEAN,
                                                           Provenance.TARGET_SAMPLE_MEAN):
        if B is None:
            B = t.apply(d.covariates[profile.rows])
        else:
            B = B[profile.rows]
        values = B.mean(axis=0)
    else:
        point = profile.point if profile.point is not None else profile.aligned(d.names)
        values = t.apply(point)[0]
    return Profile(profile.name, values, t.output_names, Basis.TRANSFORMED,
                   profile.provenance, profile.rows, profile.point)
