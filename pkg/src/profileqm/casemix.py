"""Case-mix adjusted practice estimates toward a covariate profile.

Every estimator returns an :class:`EstimateTable`. Estimators that are linear
in the outcome expose their implied weights, ``table.implied_weights(p)``,
which reproduce the point estimate as ``c @ y``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

from .core import (
    CONTINUOUS,
    NULL_TOL,
    Dataset,
    ExtrapolationStatus,
    Profile,
    null_columns,
    scaled_tolerances,
)
from .errors import (
    AllWeightsTruncatedToZero,
    RankDeficientConstraints,
    DegenerateVariance,
    MissingOutcome,
    NotLinearEstimator,
)
from .regression import LinearFit, fit_ls, independent_columns
from .solver import SbwProblem, solve_sbw
from .transform import Transform, TransformMode, balance_functions, profile_values

NEG_TOL = 1e-12

METHODS = ("fe", "mr", "sbw-nonneg", "sbw", "sbw-fe", "sbw-wr")
METHOD_TAGS = {"fe": "FE", "mr": "MR", "sbw-nonneg": "SBW", "sbw": "SBW",
               "sbw-fe": "SBW+FE", "sbw-wr": "SBW+WR"}
LINEAR_METHODS = ("fe", "mr", "sbw-fe", "sbw-wr")

Status = ExtrapolationStatus


def basis_tag(t: Transform) -> str:
    return "X" if t.mode is TransformMode.RAW else "Xt"


# --------------------------------------------------------------------------- tables


@dataclass(eq=False)
class EstimateTable:
    """Per-practice estimates of one method toward one profile.

    ``estimate`` is ``nan`` exactly where ``status`` is Infeasible. ``weights``
    holds, for weighting methods, the weight vector over each practice's own
    rows (``None`` where unavailable).
    """

    method: str
    basis: str
    profile: str
    practice_labels: tuple
    estimate: np.ndarray
    se: np.ndarray
    status: tuple
    reasons: tuple
    weights: tuple | None = None
    level: float = 0.95
    _implied: Callable | None = field(default=None, repr=False)

    @property
    def P(self) -> int:
        return len(self.practice_labels)

    @property
    def estimated(self) -> np.ndarray:
        return np.isfinite(self.estimate)

    @property
    def n_estimated(self) -> int:
        return int(self.estimated.sum())

    @property
    def n_skipped(self) -> int:
        return self.P - self.n_estimated

    @property
    def status_codes(self) -> np.ndarray:
        return np.array([s.code for s in self.status], dtype=np.int8)

    def counts(self) -> dict:
        return {s.value: sum(1 for x in self.status if x is s) for s in Status}

    @property
    def ci(self) -> tuple[np.ndarray, np.ndarray]:
        z = norm.ppf(0.5 + self.level / 2.0)
        return self.estimate - z * self.se, self.estimate + z * self.se

    @property
    def ranks(self) -> np.ndarray:
        """Rank 1 is the lowest estimate; ties go to the earlier practice; 0 if unestimated."""
        return rank_values(self.estimate)

    @property
    def linear(self) -> bool:
        return self._implied is not None

    def implied_weights(self, p: int) -> np.ndarray:
        """Implied outcome weights over all patients for dense practice ``p`` (1-based)."""
        if self._implied is None:
            raise NotLinearEstimator(f"method {self.method!r} exposes no implied weights")
        return self._implied(p)

    def with_se(self, se: np.ndarray, level: float | None = None) -> "EstimateTable":
        se = np.where(self.estimated, np.asarray(se, dtype=float), np.nan)
        return EstimateTable(self.method, self.basis, self.profile, self.practice_labels,
                             self.estimate, se, self.status, self.reasons, self.weights,
                             self.level if level is None else level, self._implied)

    def rows(self):
        """Export rows in the fixed column order."""
        lo, hi = self.ci
        ranks = self.ranks
        for j, lab in enumerate(self.practice_labels):
            yield {"practice_id": lab, "method": self.method, "basis": self.basis,
                   "estimate": self.estimate[j], "se": self.se[j], "ci_lo": lo[j],
                   "ci_hi": hi[j], "status": self.status[j].value,
                   "rank": int(ranks[j]) if ranks[j] else None}


CSV_COLUMNS = ("practice_id", "method", "basis", "estimate", "se", "ci_lo", "ci_hi",
               "status", "rank")


def rank_values(values: np.ndarray) -> np.ndarray:
    """Ascending ranks of the finite entries (ties by position); 0 marks missing."""
    values = np.asarray(values, dtype=float)
    ok = np.flatnonzero(np.isfinite(values))
    order = ok[np.argsort(values[ok], kind="stable")]
    ranks = np.zeros(values.size, dtype=np.int64)
    ranks[order] = np.arange(1, ok.size + 1)
    return ranks


# --------------------------------------------------------------------------- workspace


class Workspace:
    """Balance matrix and pooled pieces shared by every estimate on one dataset."""

    def __init__(self, d: Dataset, t: Transform, null_tol: float = NULL_TOL):
        self.d = d
        self.t = t
        self.B, self.names = balance_functions(d, t)
        self.kinds = tuple(d.kinds) + (CONTINUOUS,) * (self.B.shape[1] - d.K)
        self.tols = scaled_tolerances(self.B, self.kinds, null_tol)
        self.basis = basis_tag(t)
        self._fe: LinearFit | None = None
        self._indicators: np.ndarray | None = None
        self._pooled_cols: np.ndarray | None = None

    @property
    def y(self) -> np.ndarray:
        if self.d.outcome is None:
            raise MissingOutcome("dataset has no outcome column")
        return self.d.outcome

    @property
    def indicators(self) -> np.ndarray:
        if self._indicators is None:
            D = np.zeros((self.d.n, self.d.P))
            D[np.arange(self.d.n), self.d.codes] = 1.0
            self._indicators = D
        return self._indicators

    @property
    def pooled_columns(self) -> np.ndarray:
        """Balance columns independent of the intercept and of the columns to their left."""
        if self._pooled_cols is None:
            D = np.hstack([np.ones((self.d.n, 1)), self.B])
            kept = independent_columns(D)
            self._pooled_cols = kept[kept > 0] - 1
        return self._pooled_cols

    def target(self, profile: Profile) -> np.ndarray:
        prof = profile_values(profile, self.d, self.t, B=self.B)
        if tuple(prof.names) != tuple(self.names):
            return prof.aligned(self.names)
        return np.asarray(prof.values, dtype=float)

    def null_masks(self, target: np.ndarray) -> list:
        return null_columns(self.B, target, self.d.practice_index, self.tols)

    def fe_fit(self) -> LinearFit:
        if self._fe is None:
            D = np.hstack([self.indicators, self.B])
            names = tuple(f"practice[{lab}]" for lab in self.d.practice_labels) + tuple(self.names)
            self._fe = fit_ls(D, self.y, names=names)
        return self._fe


def _workspace(d, t, ws):
    if ws is None:
        return Workspace(d, t)
    return ws


def _status_from(c: np.ndarray) -> Status:
    return Status.EXTRAPOLATED if c.min() < -NEG_TOL else Status.INTERPOLATED


def hajek_se(w: np.ndarray, y: np.ndarray, mu: float) -> float:
    return float(np.sqrt(np.sum(w ** 2 * (y - mu) ** 2)))


def linear_se(c: np.ndarray, resid: np.ndarray) -> float:
    return float(np.sqrt(np.sum(c ** 2 * resid ** 2)))


def _table(method, ws, profile, est, se, status, reasons, weights=None, implied=None):
    return EstimateTable(method, ws.basis, profile.name, ws.d.practice_labels,
                         np.asarray(est, dtype=float), np.asarray(se, dtype=float),
                         tuple(status), tuple(reasons), weights, 0.95, implied)


# --------------------------------------------------------------------------- estimators


def estimate_fe(d: Dataset, profile: Profile, t: Transform, *, ws: Workspace | None = None,
                se: bool = True) -> EstimateTable:
    """Pooled regression on the balance functions and practice indicators.

    The estimate for practice ``p`` is the fit evaluated at the profile,
    ``alpha_p + beta @ x*``.
    """
    ws = _workspace(d, t, ws)
    fit = ws.fe_fit()
    target = ws.target(profile)
    P = d.P
    V = np.hstack([np.eye(P), np.tile(target, (P, 1))])
    est = fit.predict(V)
    C = fit.implied(V)
    status = [_status_from(C[:, j]) for j in range(P)]
    ses = [linear_se(C[:, j], fit.residuals) for j in range(P)] if se else np.full(P, np.nan)

    def implied(p):
        return fit.implied(V[p - 1])[:, 0]

    return _table("fe", ws, profile, est, ses, status, [""] * P, None, implied)


def _solve_mr(Dp, yp, v, pinv):
    kept = independent_columns(Dp)
    if kept.size < Dp.shape[1] and not pinv:
        return None
    # the generalized-inverse fallback drops dependent columns rightmost-first,
    # so the intercept always survives and the implied weights sum to one
    fit = fit_ls(Dp, yp, warn=False)
    c = fit.implied(v)[:, 0]
    return float(fit.predict(v)), c, fit.residuals


def estimate_mr(d: Dataset, profile: Profile, t: Transform, *, ws: Workspace | None = None,
                pinv: bool = False, se: bool = True) -> EstimateTable:
    """Separate regression per practice, evaluated at the profile.

    A practice whose own design is singular (too few patients, or a covariate
    constant within it) is Infeasible unless ``pinv`` selects a generalized
    inverse fit that ignores the dependent columns.
    """
    ws = _workspace(d, t, ws)
    y = ws.y
    cols = ws.pooled_columns
    target = ws.target(profile)
    v = np.concatenate([[1.0], target[cols]])
    est, ses, status, reasons, coefs = [], [], [], [], []
    for rows in d.practice_index:
        Dp = np.hstack([np.ones((rows.size, 1)), ws.B[np.ix_(rows, cols)]])
        out = _solve_mr(Dp, y[rows], v, pinv)
        if out is None:
            est.append(np.nan)
            ses.append(np.nan)
            status.append(Status.INFEASIBLE)
            reasons.append("singular practice design")
            coefs.append(None)
            continue
        mu, c, resid = out
        est.append(mu)
        ses.append(linear_se(c, resid) if se else np.nan)
        status.append(_status_from(c))
        reasons.append("")
        coefs.append(c)

    def implied(p):
        c = coefs[p - 1]
        if c is None:
            raise NotLinearEstimator("practice has no fitted model")
        out = np.zeros(d.n)
        out[d.rows_of(p)] = c
        return out

    return _table("mr", ws, profile, est, ses, status, reasons, None, implied)


def _sbw_problem(ws, p, target, cols, nonneg, delta):
    rows = ws.d.rows_of(p)
    dl = np.zeros(cols.size) if delta is None else np.broadcast_to(delta, (ws.B.shape[1],))[cols]
    return SbwProblem(ws.B[np.ix_(rows, cols)], target[cols], dl, nonneg,
                      ws.d.practice_labels[p - 1])


def estimate_sbw(d: Dataset, profile: Profile, t: Transform, nonneg: bool = True, *,
                 delta=None, ws: Workspace | None = None, se: bool = True,
                 kernel=None) -> EstimateTable:
    """Weighted practice mean with minimum-variance balancing weights."""
    ws = _workspace(d, t, ws)
    y = ws.y
    target = ws.target(profile)
    cols = np.arange(ws.B.shape[1])
    est, ses, status, reasons, weights = [], [], [], [], []
    for p in range(1, d.P + 1):
        sol = solve_sbw(_sbw_problem(ws, p, target, cols, nonneg, delta), kernel)
        status.append(sol.status)
        reasons.append(sol.reason)
        weights.append(sol.weights)
        if not sol.feasible:
            est.append(np.nan)
            ses.append(np.nan)
            continue
        yp = y[d.rows_of(p)]
        mu = float(sol.weights @ yp)
        est.append(mu)
        ses.append(hajek_se(sol.weights, yp, mu) if se else np.nan)

    def implied(p):
        w = weights[p - 1]
        if w is None:
            raise NotLinearEstimator("practice has no weights")
        out = np.zeros(d.n)
        out[d.rows_of(p)] = w
        return out

    method = "sbw-nonneg" if nonneg else "sbw"
    return _table(method, ws, profile, est, ses, status, reasons, tuple(weights), implied)


_DEP_TOL = 1e-10
_CONSISTENT_TOL = 1e-8


def unreachable_columns(Bp: np.ndarray, target: np.ndarray) -> np.ndarray:
    """Columns whose target no affine weighting of these rows can reach.

    Columns are taken left to right; a column that is (numerically) an affine
    combination of the ones before it is unreachable when that combination
    pins its weighted mean away from the target. A constant column off the
    target is the simplest case; a one-hot level absent from the practice
    makes its siblings' sum constant, which is another.
    """
    n, L = Bp.shape
    q0 = np.full(n, 1.0 / np.sqrt(n))
    basis, values = [q0], [1.0 / np.sqrt(n)]
    out = np.zeros(L, dtype=bool)
    for l in range(L):
        a = Bp[:, l] - target[l]
        scale = np.abs(a).max()
        if scale == 0.0:
            continue
        a = a / scale
        r = a.copy()
        for _ in range(2):
            for q in basis:
                r -= (q @ r) * q
        coef = [q @ a for q in basis]
        nr = np.linalg.norm(r)
        if nr > _DEP_TOL * max(1.0, np.linalg.norm(a)):
            values.append(-float(np.dot(coef, values)) / nr)
            basis.append(r / nr)
        elif abs(float(np.dot(coef, values))) > _CONSISTENT_TOL:
            out[l] = True
    return out


def _nonnull_weights(ws, target, masks, delta, kernel):
    """Unrestricted weights on each practice's reachable functions.

    Returns the weights and the per-practice null masks widened by any
    function that cannot be reached affinely (see :func:`unreachable_columns`).
    """
    out, reasons, widened = [], [], []
    for p in range(1, ws.d.P + 1):
        rows = ws.d.rows_of(p)
        mask = masks[p - 1].copy()
        cols = np.flatnonzero(~mask)
        lost = unreachable_columns(ws.B[np.ix_(rows, cols)], target[cols])
        mask[cols[lost]] = True
        cols = cols[~lost]
        widened.append(mask)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RankDeficientConstraints)
            sol = solve_sbw(_sbw_problem(ws, p, target, cols, False, delta), kernel)
        if sol.feasible:
            out.append(sol.weights)
            reasons.append("")
        else:
            n_p = rows.size
            warnings.warn(f"balancing weights unavailable for practice "
                          f"{ws.d.practice_labels[p - 1]!r} ({sol.reason}); using uniform weights",
                          stacklevel=3)
            out.append(np.full(n_p, 1.0 / n_p))
            reasons.append(f"uniform weights: {sol.reason}")
    return out, reasons, widened


def _scatter(ws, per_practice):
    w = np.empty(ws.d.n)
    for rows, wp in zip(ws.d.practice_index, per_practice):
        w[rows] = wp
    return w


def estimate_layered_fe(d: Dataset, profile: Profile, t: Transform, *,
                        mode: str = "profile_corrected", delta=None,
                        ws: Workspace | None = None, se: bool = True,
                        kernel=None) -> EstimateTable:
    """Weighting on non-null functions, pooled regression for the null ones.

    Step one solves unrestricted weights toward the profile on each practice's
    non-null balance functions (also leaving out functions the practice cannot
    reach affinely). Step two regresses the outcome on the
    functions that are null somewhere, the weights and practice indicators.
    In ``profile_corrected`` mode the estimate is the weighted mean plus the
    fitted null-function slopes times the gap between the profile and the
    practice's weighted (for a null covariate: constant) values; ``literal`` mode averages fitted values over
    the practice's patients.
    """
    if mode not in ("profile_corrected", "literal"):
        raise ValueError(f"unknown layered mode {mode!r}")
    ws = _workspace(d, t, ws)
    y = ws.y
    target = ws.target(profile)
    masks = ws.null_masks(target)
    wp, reasons, masks = _nonnull_weights(ws, target, masks, delta, kernel)
    w = _scatter(ws, wp)
    anynull = np.flatnonzero(np.any(masks, axis=0)) if masks else np.zeros(0, int)
    P, q = d.P, anynull.size
    D = np.hstack([ws.indicators, ws.B[:, anynull], w[:, None]])
    fit = fit_ls(D, y)
    V = np.zeros((P, P + q + 1))
    base = []
    for p in range(1, P + 1):
        rows = d.rows_of(p)
        if mode == "literal":
            V[p - 1, p - 1] = 1.0
            V[p - 1, P:P + q] = ws.B[np.ix_(rows, anynull)].mean(axis=0)
            V[p - 1, -1] = w[rows].mean()
            base.append(None)
        else:
            null_p = masks[p - 1][anynull]
            # weighted mean of a null function; its constant value for a true null
            reached = wp[p - 1] @ ws.B[np.ix_(rows, anynull)]
            V[p - 1, P:P + q] = np.where(null_p, target[anynull] - reached, 0.0)
            base.append(wp[p - 1])

    C = fit.implied(V)
    for p in range(1, P + 1):
        if base[p - 1] is not None:
            C[d.rows_of(p), p - 1] += base[p - 1]
    est = C.T @ y
    status = [_status_from(C[:, j]) for j in range(P)]
    ses = [linear_se(C[:, j], fit.residuals) for j in range(P)] if se else np.full(P, np.nan)

    def implied(p):
        return C[:, p - 1].copy()

    return _table("sbw-fe", ws, profile, est, ses, status, reasons, tuple(wp), implied)


def estimate_layered_wr(d: Dataset, profile: Profile, t: Transform, *, delta=None,
                        ws: Workspace | None = None, se: bool = True,
                        kernel=None) -> EstimateTable:
    """Weighted regression with non-null balancing weights truncated at zero.

    The estimate is ``alpha_p + beta @ x*`` from a weighted pooled fit on the
    full basis plus practice indicators.
    """
    ws = _workspace(d, t, ws)
    y = ws.y
    target = ws.target(profile)
    masks = ws.null_masks(target)
    wp, reasons, _ = _nonnull_weights(ws, target, masks, delta, kernel)
    truncated = []
    for p, w in enumerate(wp, start=1):
        w = np.maximum(w, 0.0)
        if not np.any(w > 0):
            warnings.warn(f"every weight of practice {d.practice_labels[p - 1]!r} truncated "
                          "to zero; using uniform weights", AllWeightsTruncatedToZero,
                          stacklevel=2)
            w = np.full(w.size, 1.0 / w.size)
        truncated.append(w)
    omega = _scatter(ws, truncated)
    P = d.P
    D = np.hstack([ws.indicators, ws.B])
    fit = fit_ls(D, y, weights=omega)
    V = np.hstack([np.eye(P), np.tile(target, (P, 1))])
    est = fit.predict(V)
    C = fit.implied(V)
    status = [_status_from(C[:, j]) for j in range(P)]
    ses = [linear_se(C[:, j], fit.residuals) for j in range(P)] if se else np.full(P, np.nan)

    def implied(p):
        return C[:, p - 1].copy()

    return _table("sbw-wr", ws, profile, est, ses, status, reasons, tuple(truncated), implied)


ESTIMATORS = {
    "fe": estimate_fe,
    "mr": estimate_mr,
    "sbw-nonneg": lambda d, x, t, **kw: estimate_sbw(d, x, t, True, **kw),
    "sbw": lambda d, x, t, **kw: estimate_sbw(d, x, t, False, **kw),
    "sbw-fe": estimate_layered_fe,
    "sbw-wr": estimate_layered_wr,
}


def estimate(method: str, d: Dataset, profile: Profile, t: Transform, **kwargs) -> EstimateTable:
    """Dispatch on a method key from :data:`METHODS`."""
    try:
        fn = ESTIMATORS[method]
    except KeyError:
        raise ValueError(f"unknown method {method!r}; choose from {', '.join(METHODS)}") from None
    return fn(d, profile, t, **kwargs)


def implied_weights(table: EstimateTable, p: int) -> np.ndarray:
    """Outcome coefficients ``c`` over all patients with ``c @ y`` equal to the estimate."""
    return table.implied_weights(p)


# --------------------------------------------------------------------------- uncertainty


def estimate_uncertainty(table: EstimateTable, d: Dataset, *, bootstrap: int = 0,
                         t: Transform | None = None, profile: Profile | None = None,
                         seed=None, level: float = 0.95, **kwargs) -> EstimateTable:
    """Attach standard errors and normal intervals.

    With ``bootstrap > 0`` patients are resampled within each practice and the
    method is re-run on every resample (``t`` and ``profile`` required);
    otherwise the analytic standard errors already on the table are kept.
    """
    if not bootstrap:
        return table.with_se(table.se, level)
    if t is None or profile is None:
        raise ValueError("bootstrap needs the transform and the profile")
    se = bootstrap_se(table.method, d, profile, t, bootstrap, seed, **kwargs)
    return table.with_se(se, level)


def bootstrap_se(method: str, d: Dataset, profile: Profile, t: Transform, reps: int = 200,
                 seed=None, **kwargs) -> np.ndarray:
    """Standard deviation of estimates over within-practice patient resamples."""
    if d.outcome is None:
        raise MissingOutcome("dataset has no outcome column")
    rng = np.random.default_rng(seed)
    # the target stays fixed at its value on the original data
    fixed = profile_values(profile, d, t)
    if t.mode is TransformMode.RAW:
        fixed = Profile(fixed.name, fixed.values, fixed.names)
    profile = fixed
    draws = np.full((reps, d.P), np.nan)
    for b in range(reps):
        rows = np.concatenate([rng.choice(r, size=r.size, replace=True) for r in d.practice_index])
        db = Dataset(d.covariates[rows], d.names, d.kinds, d.assignment[rows],
                     d.practice_labels, d.outcome[rows])
        draws[b] = estimate(method, db, profile, t, se=False, **kwargs).estimate
    ok = np.isfinite(draws).sum(axis=0)
    if np.all(ok < 2):
        raise DegenerateVariance("fewer than two valid bootstrap estimates in every practice")
    with np.errstate(invalid="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sd = np.nanstd(draws, axis=0, ddof=1)
    sd[ok < 2] = np.nan
    return sd
