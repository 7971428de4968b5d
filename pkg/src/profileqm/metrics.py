"""Evaluation quantities: bias/RMSE, rank errors, extrapolation maps, balance, churn."""

from __future__ import annotations

import csv
import io as _io
import warnings
from dataclasses import dataclass, field

import numpy as np

from .casemix import rank_values
from .core import Dataset, ExtrapolationStatus, Profile
from .errors import MismatchedPracticeSets, NoCompleteCells, ZeroVarianceCovariate

STATUS_COLORS = {
    ExtrapolationStatus.INTERPOLATED.code: "#9e9e9e",   # grey
    ExtrapolationStatus.EXTRAPOLATED.code: "#f28e2b",   # orange
    ExtrapolationStatus.INFEASIBLE.code: "#ffffff",     # white
}
MISSING_COLOR = "#000000"

# Quintile edges observed for 600 practices, upper bounds inclusive.
PUBLISHED_EDGES_600 = (120, 240, 361, 480, 600)


# --------------------------------------------------------------------------- bias / RMSE


@dataclass(frozen=True)
class BiasRmse:
    bias: float
    rmse: float
    missing: int
    practices: int


def bias_rmse(estimates, truths) -> BiasRmse:
    """Absolute bias and RMSE averaged over practices.

    ``estimates`` and ``truths`` are (replicates, practices); ``nan`` estimates
    are missing cells and are left out. Per practice the bias is the absolute
    mean error over replicates and the RMSE the root mean squared error; both
    are then averaged over practices with at least one estimate.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    tru = np.broadcast_to(np.asarray(truths, dtype=float), est.shape)
    err = est - tru
    ok = np.isfinite(err)
    per = ok.sum(axis=0)
    use = per > 0
    if not np.any(use):
        raise NoCompleteCells("no estimated cells to summarize")
    e = np.where(ok, err, 0.0)
    mean_err = e.sum(axis=0)[use] / per[use]
    mse = (e ** 2).sum(axis=0)[use] / per[use]
    return BiasRmse(float(np.abs(mean_err).mean()), float(np.sqrt(mse).mean()),
                    int((~ok).sum()), int(use.sum()))


# --------------------------------------------------------------------------- ranks


@dataclass(frozen=True)
class RankErrors:
    mean: float
    max: float
    excluded: int


def rank_errors(estimated_ranks, true_ranks) -> RankErrors:
    """Mean and (per-replicate, then averaged) maximum absolute rank difference.

    Inputs are rankings shaped (practices,) or (replicates, practices).
    """
    a = np.atleast_2d(np.asarray(estimated_ranks, dtype=float))
    b = np.atleast_2d(np.asarray(true_ranks, dtype=float))
    if a.shape != b.shape:
        raise MismatchedPracticeSets(f"rank arrays differ in shape: {a.shape} vs {b.shape}")
    diff = np.abs(a - b)
    return RankErrors(float(diff.mean()), float(diff.max(axis=1).mean()), 0)


def rank_errors_from_values(estimates, truths) -> RankErrors:
    """Rank errors with practices unestimated in a replicate excluded pairwise.

    Both estimates and truths are re-ranked on the practices they share.
    """
    est = np.atleast_2d(np.asarray(estimates, dtype=float))
    tru = np.broadcast_to(np.asarray(truths, dtype=float), est.shape)
    total, count, maxes, excluded = 0.0, 0, [], 0
    for e, t in zip(est, tru):
        ok = np.isfinite(e) & np.isfinite(t)
        excluded += int((~ok).sum())
        if not np.any(ok):
            continue
        diff = np.abs(rank_values(e[ok]) - rank_values(t[ok]))
        total += diff.sum()
        count += diff.size
        maxes.append(diff.max())
    if not count:
        raise NoCompleteCells("no replicate has a ranked practice")
    return RankErrors(total / count, float(np.mean(maxes)), excluded)


# --------------------------------------------------------------------------- maps


@dataclass(frozen=True)
class ExtrapolationMap:
    """Replicate x practice grid of status codes (-1 marks a missing cell)."""

    grid: np.ndarray
    title: str = ""

    def counts(self) -> dict:
        out = {s.value: int((self.grid == s.code).sum()) for s in ExtrapolationStatus}
        out["missing"] = int((self.grid < 0).sum())
        return out

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        R, P = self.grid.shape
        w.writerow(["replicate"] + [f"practice_{p}" for p in range(1, P + 1)])
        for r in range(R):
            w.writerow([r + 1] + [int(c) for c in self.grid[r]])
        return buf.getvalue()

    def to_svg(self, cell: int = 4) -> str:
        """Static raster: grey interpolated, orange extrapolated, white infeasible."""
        R, P = self.grid.shape
        W, H = P * cell, R * cell
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H + 16}" '
                 f'viewBox="0 0 {W} {H + 16}">',
                 f'<text x="0" y="12" font-family="sans-serif" font-size="11">{self.title}</text>',
                 f'<g transform="translate(0,16)" shape-rendering="crispEdges">',
                 f'<rect x="0" y="0" width="{W}" height="{H}" fill="#ffffff" stroke="#cccccc"/>']
        for r in range(R):
            row = self.grid[r]
            p = 0
            while p < P:  # one rect per run of equal codes
                q = p
                while q + 1 < P and row[q + 1] == row[p]:
                    q += 1
                code = int(row[p])
                color = STATUS_COLORS.get(code, MISSING_COLOR)
                if color != "#ffffff":
                    parts.append(f'<rect x="{p * cell}" y="{r * cell}" width="{(q - p + 1) * cell}" '
                                 f'height="{cell}" fill="{color}"/>')
                p = q + 1
        parts.append("</g></svg>")
        return "\n".join(parts) + "\n"


def extrapolation_map(statuses, title: str = "") -> ExtrapolationMap:
    grid = np.atleast_2d(np.asarray(
        [[s.code if isinstance(s, ExtrapolationStatus) else int(s) for s in row]
         for row in np.atleast_2d(np.asarray(statuses, dtype=object))], dtype=np.int8))
    return ExtrapolationMap(grid, title)


# --------------------------------------------------------------------------- balance


@dataclass(frozen=True)
class BalanceRow:
    covariate: str
    target: float
    before: float
    after: float
    standardized: bool


def balance_table(d: Dataset, profile: Profile, weights, rows=None) -> list:
    """Standardized differences to the profile before (uniform) and after weighting.

    ``rows`` selects the weighted patients (default: all); differences are
    divided by the full-dataset standard deviation of each covariate, and
    reported unstandardized (with a warning) where that is zero.
    """
    X = d.covariates if rows is None else d.covariates[np.asarray(rows)]
    w = np.asarray(weights, dtype=float)
    if w.shape != (X.shape[0],):
        raise ValueError("one weight per selected patient is required")
    target = profile.aligned(d.names)
    sd = d.covariates.std(axis=0, ddof=1) if d.n > 1 else np.zeros(d.K)
    before = X.mean(axis=0) - target
    after = w @ X / w.sum() - target
    out = []
    for j, name in enumerate(d.names):
        if sd[j] > 0:
            out.append(BalanceRow(name, float(target[j]), float(before[j] / sd[j]),
                                  float(after[j] / sd[j]), True))
        else:
            warnings.warn(f"covariate {name!r} has zero variance; difference left unstandardized",
                          ZeroVarianceCovariate, stacklevel=2)
            out.append(BalanceRow(name, float(target[j]), float(before[j]), float(after[j]), False))
    return out


def balance_by_practice(d: Dataset, profile: Profile, weights) -> dict:
    """Per covariate, arrays of before/after differences over practices with weights."""
    before, after = [], []
    for rows, w in zip(d.practice_index, weights):
        if w is None:
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ZeroVarianceCovariate)
            tab = balance_table(d, profile, w, rows)
        before.append([r.before for r in tab])
        after.append([r.after for r in tab])
    before = np.array(before).reshape(-1, d.K)
    after = np.array(after).reshape(-1, d.K)
    return {name: (before[:, j], after[:, j]) for j, name in enumerate(d.names)}


# --------------------------------------------------------------------------- churn


def quintile_edges(P: int, bins: int = 5) -> np.ndarray:
    """Inclusive upper rank bound of each bin."""
    if P == 600 and bins == 5:
        return np.array(PUBLISHED_EDGES_600)
    base, rem = divmod(P, bins)
    sizes = np.full(bins, base) + (np.arange(bins) < rem)
    return np.cumsum(sizes)


@dataclass(frozen=True)
class TransitionMatrix:
    counts: np.ndarray
    edges: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def summary(self) -> dict:
        m = self.counts
        k = m.shape[0]
        i, j = np.indices(m.shape)
        gap = np.abs(i - j)
        total = self.total
        same = int(m[gap == 0].sum())
        one = int(m[gap == 1].sum())
        more = int(m[gap >= 2].sum())
        corners = int(m[0, k - 1] + m[k - 1, 0])
        pct = (lambda c: round(100.0 * c / total, 1)) if total else (lambda c: float("nan"))
        return {"total": total, "same": same, "same_pct": pct(same), "one": one,
                "one_pct": pct(one), "two_plus": more, "two_plus_pct": pct(more),
                "corners": corners, "corners_pct": pct(corners)}

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        labels = bin_labels(self.edges)
        w.writerow(["bin"] + labels)
        for lab, row in zip(labels, self.counts):
            w.writerow([lab] + [int(x) for x in row])
        return buf.getvalue()


def bin_labels(edges) -> list:
    lows = [1] + [int(e) for e in edges[:-1]]
    return [f"[{lows[0]},{edges[0]}]"] + [f"({lo},{hi}]" for lo, hi in zip(lows[1:], edges[1:])]


def _bins(ranks, edges):
    return np.searchsorted(edges, ranks, side="left")


def quintile_transition(ranks_a, ranks_b, bins: int = 5, edges=None):
    """Cross-tabulate rank bins under two profiles; returns (matrix, churn summary).

    Ranks of 0 (unestimated) in either input are excluded pairwise. The summary
    adds the share of practices whose rank moves by at least 10% of the
    number ranked.
    """
    a = np.asarray(ranks_a)
    b = np.asarray(ranks_b)
    if a.shape != b.shape:
        raise MismatchedPracticeSets("rankings cover different practice sets")
    ok = (a > 0) & (b > 0)
    excluded = int((~ok).sum())
    if excluded:
        a = rank_values(a[ok].astype(float))
        b = rank_values(b[ok].astype(float))
    P = a.size
    edges = quintile_edges(P, bins) if edges is None else np.asarray(edges)
    ia, ib = _bins(a, edges), _bins(b, edges)
    k = edges.size
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (ia, ib), 1)
    tm = TransitionMatrix(counts, edges)
    s = tm.summary()
    big = np.abs(a - b) >= 0.1 * P
    s["moved_10pct"] = int(big.sum())
    s["moved_10pct_pct"] = round(100.0 * big.mean(), 1) if P else float("nan")
    s["excluded"] = excluded
    return tm, s


def churn_summary(counts, edges=PUBLISHED_EDGES_600) -> dict:
    """Churn summary of a given transition matrix (e.g. a published one)."""
    return TransitionMatrix(np.asarray(counts, dtype=np.int64), np.asarray(edges)).summary()


def rank_scatter_svg(ranks_a, ranks_b, size: int = 300, labels=("A", "B")) -> str:
    a = np.asarray(ranks_a, dtype=float)
    b = np.asarray(ranks_b, dtype=float)
    ok = (a > 0) & (b > 0)
    a, b = a[ok], b[ok]
    top = max(a.max(initial=1), b.max(initial=1))
    pad = 24
    s = size - 2 * pad
    pts = [f'<circle cx="{pad + s * (x - 1) / max(top - 1, 1):.2f}" '
           f'cy="{pad + s * (1 - (y - 1) / max(top - 1, 1)):.2f}" r="1.5" fill="#4e79a7"/>'
           for x, y in zip(a, b)]
    return "\n".join([
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">',
        f'<rect x="{pad}" y="{pad}" width="{s}" height="{s}" fill="none" stroke="#999999"/>',
        f'<line x1="{pad}" y1="{pad + s}" x2="{pad + s}" y2="{pad}" stroke="#cccccc"/>',
        f'<text x="{size / 2}" y="{size - 6}" font-size="11" text-anchor="middle">rank ({labels[0]})</text>',
        f'<text x="10" y="{size / 2}" font-size="11" transform="rotate(-90 10 {size / 2})" '
        f'text-anchor="middle">rank ({labels[1]})</text>',
        *pts, "</svg>"]) + "\n"


# --------------------------------------------------------------------------- report


@dataclass
class MetricsReport:
    """One row per (setting, method, basis, target)."""

    rows: list = field(default_factory=list)

    COLUMNS = ("setting", "covariates", "method", "basis", "target", "bias", "rmse",
               "rank_mean", "rank_max", "interpolated", "extrapolated", "infeasible",
               "missing", "replicates")

    def get(self, method: str, basis: str = "X", target: str = "System", setting=None) -> dict:
        for r in self.rows:
            if (r["method"], r["basis"], r["target"]) == (method, basis, target) and \
                    (setting is None or r["setting"] == setting):
                return r
        raise KeyError((method, basis, target, setting))

    def to_csv(self) -> str:
        buf = _io.StringIO()
        w = csv.DictWriter(buf, fieldnames=self.COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in self.rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
        return buf.getvalue()

    def summary(self) -> dict:
        return {"cells": len(self.rows), "rows": self.rows}

    def extend(self, other: "MetricsReport") -> "MetricsReport":
        return MetricsReport(self.rows + other.rows)


def build_report(study) -> MetricsReport:
    """Aggregate a :class:`~profileqm.simulate.StudyResult`."""
    cfg = study.config
    rows = []
    R = study.estimates.shape[0]
    for ci, (method, basis) in enumerate(study.cells):
        for ti, target in enumerate(study.targets):
            est = study.estimates[:, ci, ti]
            tru = study.truth[:, ti]
            st = study.status[:, ci, ti]
            try:
                br = bias_rmse(est, tru)
                bias, rmse = br.bias, br.rmse
            except NoCompleteCells:
                bias = rmse = float("nan")
            try:
                re = rank_errors_from_values(est, tru)
                rmean, rmax = re.mean, re.max
            except NoCompleteCells:
                rmean = rmax = float("nan")
            row = {"setting": cfg.setting, "covariates": cfg.covariate_count, "method": method,
                   "basis": basis, "target": target, "bias": bias, "rmse": rmse,
                   "rank_mean": rmean, "rank_max": rmax}
            for s in ExtrapolationStatus:
                row[s.value] = int((st == s.code).sum())
            row["missing"] = int((st < 0).sum())
            row["replicates"] = R
            rows.append(row)
    return MetricsReport(rows)


def study_maps(study) -> dict:
    """Extrapolation map per (method, basis, target)."""
    out = {}
    for ci, (method, basis) in enumerate(study.cells):
        for ti, target in enumerate(study.targets):
            out[(method, basis, target)] = ExtrapolationMap(
                study.status[:, ci, ti].astype(np.int8), f"{method} ({basis}), {target}")
    return out
