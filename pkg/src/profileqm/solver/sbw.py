"""Stable balancing weights for one practice and feasibility classification."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import qr, solve_triangular
from scipy.optimize import linprog

from ..core import Dataset, ExtrapolationStatus, Profile
from ..errors import ColumnMismatch, Infeasible, NumericalFailure, RankDeficientConstraints
from ..transform import Transform, balance_functions, profile_values
from . import _backend

NEG_TOL = 1e-12
_DEP_TOL = 1e-10
_RESID_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class SbwProblem:
    """Balance matrix of one practice, its target and tolerances."""

    B: np.ndarray
    target: np.ndarray
    delta: np.ndarray | None = None
    nonneg: bool = True
    practice: object = None
    names: tuple | None = None

    def __post_init__(self):
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B[:, None]
        target = np.atleast_1d(np.asarray(self.target, dtype=float))
        if B.shape[0] < 1:
            raise ValueError("a practice needs at least one patient")
        if target.shape != (B.shape[1],):
            raise ColumnMismatch("target length differs from the number of balance functions")
        delta = np.zeros(B.shape[1]) if self.delta is None else \
            np.broadcast_to(np.asarray(self.delta, dtype=float), (B.shape[1],)).copy()
        if np.any(delta < 0):
            raise ValueError("balance tolerances must be nonnegative")
        if self.names is not None and len(self.names) != B.shape[1]:
            raise ColumnMismatch("names do not align with balance columns")
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "delta", delta)

    @property
    def size(self) -> int:
        return self.B.shape[0]


@dataclass(frozen=True, eq=False)
class WeightSolution:
    weights: np.ndarray | None
    status: ExtrapolationStatus
    objective: float = float("nan")
    residuals: np.ndarray | None = None
    duals: dict | None = None
    reason: str = ""
    practice: object = None
    iterations: int = 0

    @property
    def feasible(self) -> bool:
        return self.status is not ExtrapolationStatus.INFEASIBLE

    def require(self) -> np.ndarray:
        if self.weights is None:
            raise Infeasible(self.reason or "no weights")
        return self.weights


@dataclass
class _System:
    """Normalized constraint rows: equalities first, then ``>=`` rows."""
    C: np.ndarray
    d: np.ndarray
    n_eq: int
    all_eq: np.ndarray = field(repr=False)
    all_eq_d: np.ndarray = field(repr=False)
    scale: np.ndarray = field(repr=False)
    dropped: int = 0


def _independent_rows(A: np.ndarray) -> np.ndarray:
    """Indices of rows kept by sequential Gram-Schmidt; later dependents drop first."""
    basis = []
    keep = []
    for i, row in enumerate(A):
        v = row.copy()
        for _ in range(2):
            for q in basis:
                v -= (q @ v) * q
        nv = np.linalg.norm(v)
        if nv > _DEP_TOL * max(1.0, np.linalg.norm(row)):
            basis.append(v / nv)
            keep.append(i)
    return np.array(keep, dtype=int)


def _system(prob: SbwProblem) -> _System:
    n = prob.size
    A0 = prob.B - prob.target
    scale = np.abs(A0).max(axis=0)
    eq_rows = [np.full(n, 1.0 / np.sqrt(n))]
    eq_d = [1.0 / np.sqrt(n)]
    in_rows, in_d = [], []
    for l in range(A0.shape[1]):
        if scale[l] == 0.0:
            continue  # column sits at the target for every patient
        a = A0[:, l] / scale[l]
        na = np.linalg.norm(a)
        a = a / na
        if prob.delta[l] == 0.0:
            eq_rows.append(a)
            eq_d.append(0.0)
        else:
            bound = prob.delta[l] / (scale[l] * na)
            in_rows += [a, -a]
            in_d += [-bound, -bound]
    E = np.array(eq_rows)
    Ed = np.array(eq_d)
    keep = _independent_rows(E)
    dropped = E.shape[0] - keep.size
    if dropped:
        warnings.warn("dependent balance constraints dropped before solving",
                      RankDeficientConstraints, stacklevel=3)
    C = np.vstack([E[keep]] + ([np.array(in_rows)] if in_rows else []))
    d = np.concatenate([Ed[keep], np.array(in_d)])
    return _System(C, d, keep.size, E, Ed, scale, dropped)


def _lp_feasible(sys: _System, n: int) -> tuple[bool, np.ndarray | None]:
    kwargs = dict(A_eq=sys.all_eq, b_eq=sys.all_eq_d)
    if sys.C.shape[0] > sys.n_eq:
        kwargs.update(A_ub=-sys.C[sys.n_eq:], b_ub=-sys.d[sys.n_eq:])
    res = linprog(np.zeros(n), bounds=(0, None), method="highs",
                  options={"primal_feasibility_tolerance": 1e-9, "presolve": True}, **kwargs)
    if res.status == 0:
        return True, res.x
    if res.status == 2:
        return False, None
    raise NumericalFailure(f"feasibility LP failed: {res.message}")


def check_feasibility(prob: SbwProblem) -> bool:
    """Whether nonnegative weights summing to one meet every balance band.

    With zero tolerances this is membership of the target in the convex hull
    of the practice's balance rows, decided by a phase-1 linear program.
    """
    sys = _system(prob)
    return _lp_feasible(sys, prob.size)[0]


def _polish(sys: _System, u, free, active):
    """Exact equality-constrained least-norm solve on the final active set."""
    E = np.flatnonzero(active)
    CE = sys.C[E][:, free]
    w = np.zeros(u.size)
    if E.size:
        # QR of CE^T avoids squaring the condition number; one refinement step
        # recovers the equalities when the weights are large (nearly collinear patients)
        Q, R = qr(CE.T, mode="economic")
        lam_E = np.zeros(E.size)
        w[free] = u[free]
        for _ in range(2):
            r = sys.d[E] - CE @ w[free]
            z = solve_triangular(R, r, trans="T")
            w[free] += Q @ z
            lam_E += solve_triangular(R, z)
    else:
        lam_E = np.zeros(0)
        w[free] = u[free]
    lam = np.zeros(sys.C.shape[0])
    lam[E] = lam_E
    mu = np.zeros(u.size)
    zidx = ~free
    if np.any(zidx):
        mu[zidx] = -(u[zidx] + sys.C[E][:, zidx].T @ lam_E)
    return w, lam, mu


def _violation(sys: _System, w, nonneg):
    eq = np.abs(sys.all_eq @ w - sys.all_eq_d).max(initial=0.0)
    ineq = np.max(sys.d[sys.n_eq:] - sys.C[sys.n_eq:] @ w, initial=0.0)
    neg = max(0.0, -w.min()) if nonneg else 0.0
    return max(eq, ineq), neg


def solve_sbw(prob: SbwProblem, kernel=None) -> WeightSolution:
    """Minimum-variance weights that sum to one and meet the balance bands."""
    n = prob.size
    u = np.full(n, 1.0 / n)
    sys = _system(prob)
    solve = _backend.get_kernel(kernel)
    infeasible = lambda why: WeightSolution(None, ExtrapolationStatus.INFEASIBLE, reason=why,
                                            practice=prob.practice)

    if sys.n_eq > n:
        return infeasible("more independent balance constraints than patients")
    code, w, free, active, iters = solve(sys.C, sys.d, sys.n_eq, u, False)
    if code not in (0, 1):
        raise NumericalFailure(f"active-set kernel returned code {code}")
    if code == 1:
        return infeasible("inconsistent balance constraints")
    w, lam, mu = _polish(sys, u, free, active)
    viol, _ = _violation(sys, w, False)
    if viol > _RESID_TOL:
        return infeasible("inconsistent balance constraints")
    if prob.nonneg and w.min() < -NEG_TOL:
        feasible, _ = _lp_feasible(sys, n)
        if not feasible:
            return infeasible("target outside the convex hull of the practice")
        code, w, free, active, iters = solve(sys.C, sys.d, sys.n_eq, u, True)
        if code == 1:
            return infeasible("target on the convex-hull boundary")
        if code != 0:
            raise NumericalFailure(f"active-set kernel returned code {code}")
        w, lam, mu = _polish(sys, u, free, active)
        viol, neg = _violation(sys, w, True)
        if viol > _RESID_TOL or neg > NEG_TOL:
            raise NumericalFailure("polished nonnegative solution violates constraints")
    if w.min() < -NEG_TOL:
        status = ExtrapolationStatus.EXTRAPOLATED
    else:
        status = ExtrapolationStatus.INTERPOLATED
    resid = np.abs(w @ prob.B - prob.target)
    return WeightSolution(
        weights=w,
        status=status,
        objective=float(np.sum((w - 1.0 / n) ** 2)),
        residuals=resid,
        duals={"rows": lam, "bounds": mu, "n_eq": sys.n_eq},
        practice=prob.practice,
        iterations=int(iters),
    )


def kkt_residuals(prob: SbwProblem, sol: WeightSolution) -> dict:
    """Stationarity, primal, dual and complementarity residuals of a solution."""
    sys = _system(prob)
    w = sol.require()
    n = prob.size
    lam, mu = sol.duals["rows"], sol.duals["bounds"]
    grad = w - 1.0 / n
    stat = grad - sys.C.T @ lam - mu
    slack = sys.C @ w - sys.d
    primal = max(np.abs(slack[:sys.n_eq]).max(initial=0.0),
                 np.max(-slack[sys.n_eq:], initial=0.0),
                 max(0.0, -w.min()) if prob.nonneg else 0.0)
    dual = max(np.max(-lam[sys.n_eq:], initial=0.0), np.max(-mu, initial=0.0))
    comp = max(np.abs(lam[sys.n_eq:] * slack[sys.n_eq:]).max(initial=0.0),
               np.abs(mu * w).max(initial=0.0))
    return {"stationarity": float(np.abs(stat).max()), "primal": float(primal),
            "dual": float(dual), "complementarity": float(comp)}


def practice_problems(d: Dataset, profile: Profile, t: Transform, nonneg: bool,
                      delta=None, columns=None, B=None, names=None):
    """One :class:`SbwProblem` per practice, optionally over a column subset.

    ``columns`` may be a single index array for every practice or a sequence with
    one index array per practice.
    """
    if B is None:
        B, names = balance_functions(d, t)
    prof = profile_values(profile, d, t, B=B)
    target = prof.aligned(names) if tuple(prof.names) != tuple(names) else prof.values
    delta = np.zeros(B.shape[1]) if delta is None else np.broadcast_to(delta, (B.shape[1],))
    probs = []
    for p, rows in enumerate(d.practice_index, start=1):
        cols = columns if columns is None or isinstance(columns, np.ndarray) else columns[p - 1]
        if cols is None:
            cols = np.arange(B.shape[1])
        probs.append(SbwProblem(B[np.ix_(rows, cols)], target[cols], delta[cols], nonneg,
                                d.practice_labels[p - 1], tuple(names[c] for c in cols)))
    return probs


def solve_practices(d: Dataset, profile: Profile, t: Transform, nonneg: bool,
                    delta=None, columns=None, B=None, names=None, kernel=None) -> list:
    return [solve_sbw(pr, kernel) for pr in
            practice_problems(d, profile, t, nonneg, delta, columns, B, names)]


def classify_practices(d: Dataset, profile: Profile, t: Transform, nonneg: bool = True,
                       delta=None, B=None, names=None) -> list:
    """Interpolated / Extrapolated / Infeasible status of every practice."""
    out = []
    for pr in practice_problems(d, profile, t, nonneg, delta, B=B, names=names):
        if nonneg:
            ok = check_feasibility(pr)
            out.append(ExtrapolationStatus.INTERPOLATED if ok else ExtrapolationStatus.INFEASIBLE)
        else:
            out.append(solve_sbw(pr).status)
    return out
