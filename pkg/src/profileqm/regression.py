"""Least squares with deterministic dropping of dependent columns."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import RankDeficientDesign

PIVOT_TOL = 1e-10


def independent_columns(D: np.ndarray, tol: float = PIVOT_TOL, gram: np.ndarray | None = None) -> np.ndarray:
    """Columns kept by a left-to-right Cholesky sweep of ``D.T @ D``.

    A column is dropped when its squared residual on the kept columns to its
    left is at most ``tol`` times its squared norm, so dependents are removed
    rightmost-first.
    """
    G = D.T @ D if gram is None else gram
    k = G.shape[0]
    L = np.zeros((k, k))
    kept = []
    for j in range(k):
        gjj = G[j, j]
        if gjj <= 0.0:
            continue
        if kept:
            l = solve_triangular(L[np.ix_(range(len(kept)), range(len(kept)))],
                                 G[kept, j], lower=True, check_finite=False)
            piv = gjj - l @ l
        else:
            l = np.zeros(0)
            piv = gjj
        if piv <= tol * gjj:
            continue
        r = len(kept)
        L[r, :r] = l
        L[r, r] = np.sqrt(piv)
        kept.append(j)
    return np.array(kept, dtype=int)


@dataclass(eq=False)
class LinearFit:
    """A (weighted) least-squares fit kept in QR form.

    ``coef`` has one entry per design column, ``nan`` for dropped columns.
    Predictions ``v @ coef`` are linear in the outcome with coefficients
    returned by :meth:`implied`.
    """

    coef: np.ndarray
    kept: np.ndarray
    names: tuple
    fitted: np.ndarray
    residuals: np.ndarray
    sigma2: float
    Q: np.ndarray
    R: np.ndarray
    sqrt_w: np.ndarray | None
    n_columns: int

    @property
    def dropped(self) -> tuple:
        mask = np.ones(self.n_columns, bool)
        mask[self.kept] = False
        return tuple(self.names[j] for j in np.flatnonzero(mask))

    @property
    def rank_deficient(self) -> bool:
        return self.kept.size < self.n_columns

    def predict(self, v: np.ndarray) -> float | np.ndarray:
        v = np.asarray(v, dtype=float)
        return v[..., self.kept] @ self.coef[self.kept]

    def implied(self, v: np.ndarray) -> np.ndarray:
        """Outcome coefficients ``c`` with ``predict(v) == c @ y``; one column per row of ``v``."""
        v = np.atleast_2d(np.asarray(v, dtype=float))[:, self.kept]
        a = solve_triangular(self.R, v.T, trans="T", check_finite=False)
        c = self.Q @ a
        if self.sqrt_w is not None:
            c = c * self.sqrt_w[:, None]
        return c


def fit_ls(D: np.ndarray, y: np.ndarray, weights: np.ndarray | None = None,
           names=None, tol: float = PIVOT_TOL, warn: bool = True) -> LinearFit:
    """Least squares of ``y`` on ``D`` (optionally weighted), dropping dependent columns."""
    D = np.asarray(D, dtype=float)
    y = np.asarray(y, dtype=float)
    n, k = D.shape
    names = tuple(names) if names is not None else tuple(f"c{j}" for j in range(k))
    sw = None
    Dw, yw = D, y
    if weights is not None:
        sw = np.sqrt(np.asarray(weights, dtype=float))
        Dw = D * sw[:, None]
        yw = y * sw
    kept = independent_columns(Dw, tol)
    if warn and kept.size < k:
        warnings.warn("dependent regression columns dropped", RankDeficientDesign, stacklevel=2)
    Q, R = np.linalg.qr(Dw[:, kept])
    b = solve_triangular(R, Q.T @ yw, check_finite=False)
    coef = np.full(k, np.nan)
    coef[kept] = b
    fitted = D[:, kept] @ b
    resid = y - fitted
    dof = max(int((sw > 0).sum()) if sw is not None else n, 1) - kept.size
    wr = resid if sw is None else resid * sw
    sigma2 = float(wr @ wr / dof) if dof > 0 else float("nan")
    return LinearFit(coef, kept, names, fitted, resid, sigma2, Q, R, sw, k)
