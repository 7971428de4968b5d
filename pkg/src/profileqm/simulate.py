"""Simulated practice systems: covariates, practice assignment, outcomes and truths.

The 10-covariate design draws three correlated normals, a uniform, a
chi-square, a Bernoulli and four more correlated normals; practices are drawn
from a softmax on the first six covariates. The 30-covariate design appends
20 Bernoulli(0.5) columns that shift both the assignment and the outcome.
"""

from __future__ import annotations

import hashlib
import json
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import softmax

from .casemix import Workspace, estimate
from .core import ExtrapolationStatus, from_arrays, target_sample_profile
from .errors import ConfigError
from .transform import TransformMode, fit_transform, raw_transform

SIGMA3 = np.array([[2.0, 1.0, -1.0],
                   [1.0, 1.0, -0.5],
                   [-1.0, -0.5, 2.0]])
SIGMA4 = np.array([[2.0, 1.0, -1.0, -1.0],
                   [1.0, 1.0, -0.5, -0.5],
                   [-1.0, -0.5, 2.0, 0.5],
                   [-1.0, -0.5, 0.5, 1.0]])
ETA = np.array([1.0, 1.0, 1.0, -1.0, 1.0, 1.0])
EXTRA_BINARY = 20
EXTRA_ASSIGN = 0.2
EXTRA_OUTCOME = 0.5
TARGETS = ("System", "Smallest", "Largest")
BASES = ("X", "Xt")


@dataclass(frozen=True)
class SimConfig:
    """One simulation world.

    ``setting3_variant`` optionally replaces the setting-3 mean function with a
    numpy expression in ``X1 .. X10``, ``p`` and ``np`` (it must keep the
    marginal mean ``0.1 * p`` for the truths to stay exact).

    In setting 4 every squared covariate is centred by its variance, so that
    ``E[Y(p)] = 0.1 p``. ``setting4_printed`` instead centres ``X3**2`` by 1 as
    the formula is usually written; under ``Var(X3) = 2`` that adds
    ``(-1)**p + 2`` to every practice's marginal mean.
    """

    setting: int = 1
    covariate_count: int = 10
    n: int = 10000
    P: int = 100
    replicates: int = 100
    seed: int = 20240101
    targets: tuple = TARGETS
    setting3_variant: str | None = None
    max_moment_components: int | None = None
    setting4_printed: bool = False

    def __post_init__(self):
        if self.setting not in (1, 2, 3, 4):
            raise ConfigError(f"setting must be 1, 2, 3 or 4, got {self.setting!r}")
        if self.covariate_count not in (10, 30):
            raise ConfigError(f"covariate_count must be 10 or 30, got {self.covariate_count!r}")
        if self.P < 1 or self.n < self.P:
            raise ConfigError("need n >= P >= 1")
        if self.replicates < 1:
            raise ConfigError("need at least one replicate")
        bad = set(self.targets) - set(TARGETS)
        if bad or not self.targets:
            raise ConfigError(f"unknown targets {sorted(bad)}; choose from {TARGETS}")
        object.__setattr__(self, "targets", tuple(self.targets))

    def key(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def replicate_rng(cfg: SimConfig, r: int) -> np.random.Generator:
    """Independent generator for replicate ``r`` (a counter-derived substream)."""
    return np.random.default_rng(np.random.SeedSequence(cfg.seed, spawn_key=(r,)))


def covariate_names(cfg: SimConfig) -> tuple:
    names = [f"X{j}" for j in range(1, 11)]
    if cfg.covariate_count == 30:
        names += [f"Z{j}" for j in range(1, EXTRA_BINARY + 1)]
    return tuple(names)


def covariate_kinds(cfg: SimConfig) -> tuple:
    kinds = ["continuous"] * 5 + ["binary"] + ["continuous"] * 4
    if cfg.covariate_count == 30:
        kinds += ["binary"] * EXTRA_BINARY
    return tuple(kinds)


def gen_covariates(cfg: SimConfig, rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    n = cfg.n if n is None else n
    X = np.empty((n, cfg.covariate_count))
    X[:, 0:3] = rng.multivariate_normal(np.zeros(3), SIGMA3, size=n)
    X[:, 3] = rng.uniform(-3.0, 3.0, size=n)
    X[:, 4] = rng.chisquare(1, size=n)
    X[:, 5] = rng.binomial(1, 0.5, size=n)
    X[:, 6:10] = rng.multivariate_normal(np.zeros(4), SIGMA4, size=n)
    if cfg.covariate_count == 30:
        X[:, 10:] = rng.binomial(1, 0.5, size=(n, EXTRA_BINARY))
    return X


def assignment_probabilities(X: np.ndarray, cfg: SimConfig) -> np.ndarray:
    """n x P softmax probabilities; column ``p - 1`` belongs to practice ``p``."""
    X = np.atleast_2d(X)
    s = X[:, :6] @ ETA
    if cfg.covariate_count == 30:
        s = s + EXTRA_ASSIGN * X[:, 10:].sum(axis=1)
    scale = 1.0 - np.arange(1, cfg.P + 1) / 100.0
    return softmax(np.outer(s, scale), axis=1)


def assign_practices(X: np.ndarray, cfg: SimConfig, rng: np.random.Generator) -> np.ndarray:
    """Practice number in ``1..P`` for every row (one multinomial draw each)."""
    prob = assignment_probabilities(X, cfg)
    cum = np.cumsum(prob, axis=1)
    u = rng.random(X.shape[0])[:, None]
    return np.minimum((u > cum).sum(axis=1), cfg.P - 1) + 1


def _mean_function(X: np.ndarray, p, setting: int, variant: str | None = None,
                   printed4: bool = False) -> np.ndarray:
    """Noiseless potential outcome of rows ``X`` under practice ``p``."""
    X1, X2, X3, X4, X5, X6 = (X[:, j] for j in range(6))
    p = np.asarray(p, dtype=float)
    sgn = np.where(np.mod(p, 2) == 0, 1.0, -1.0)
    alt = sgn + 2.0
    tail = -sgn * X4 + sgn * (X5 - 1.0) + sgn * (X6 - 0.5) + 0.1 * p
    if setting == 3 and variant:
        env = {f"X{j + 1}": X[:, j] for j in range(min(X.shape[1], 10))}
        env.update(p=p, np=np)
        return np.broadcast_to(eval(variant, {"__builtins__": {}}, env), X1.shape).astype(float)
    if setting == 1:
        return (1.0 + p / 50.0) * X1 + alt * X2 + alt * X3 + tail
    if setting in (2, 3):
        return (1.0 + p / 50.0) * (X1 ** 2 - 2.0) + alt * X2 + alt * X3 + tail
    c3 = 1.0 if printed4 else SIGMA3[2, 2]
    return ((1.0 + p / 50.0) * (X1 ** 2 - 2.0) + alt * (X2 ** 2 - 1.0) + alt * (X3 ** 2 - c3)
            - 0.5 * alt * (X2 * X3 + 0.5) + tail)


def potential_mean(X: np.ndarray, p, cfg: SimConfig) -> np.ndarray:
    m = _mean_function(X, p, cfg.setting, cfg.setting3_variant, cfg.setting4_printed)
    if cfg.covariate_count == 30:
        m = m + EXTRA_OUTCOME * (X[:, 10:] - 0.5).sum(axis=1)
    return m


@dataclass(frozen=True)
class TruthTable:
    """Marginal truths ``0.1 p`` and, per target, the mean noiseless outcome under each ``p``."""

    marginal: np.ndarray
    conditional: dict = field(default_factory=dict)


def conditional_truth(X: np.ndarray, rows: np.ndarray, cfg: SimConfig) -> np.ndarray:
    Xr = X[rows]
    return np.array([potential_mean(Xr, p, cfg).mean() for p in range(1, cfg.P + 1)])


def gen_outcomes(X: np.ndarray, assignment: np.ndarray, cfg: SimConfig,
                 rng: np.random.Generator, targets: dict | None = None):
    """Observed outcomes ``Y_i = m_{D_i}(X_i) + eps_i`` and the truth table."""
    y = potential_mean(X, assignment, cfg) + rng.standard_normal(X.shape[0])
    marginal = 0.1 * np.arange(1, cfg.P + 1)
    cond = {name: conditional_truth(X, rows, cfg) for name, rows in (targets or {}).items()}
    return y, TruthTable(marginal, cond)


def target_rows(assignment: np.ndarray, cfg: SimConfig) -> dict:
    sizes = np.bincount(assignment, minlength=cfg.P + 1)[1:]
    present = np.flatnonzero(sizes > 0)
    small = present[np.argmin(sizes[present])] + 1
    large = present[np.argmax(sizes[present])] + 1
    rows = {"System": np.arange(assignment.size),
            "Smallest": np.flatnonzero(assignment == small),
            "Largest": np.flatnonzero(assignment == large)}
    return {k: rows[k] for k in cfg.targets}


def simulate_dataset(cfg: SimConfig, r: int):
    """Dataset, truth table and target rows of replicate ``r``."""
    rng = replicate_rng(cfg, r)
    X = gen_covariates(cfg, rng)
    a = assign_practices(X, cfg, rng)
    targets = target_rows(a, cfg)
    y, truth = gen_outcomes(X, a, cfg, rng, targets)
    d = from_arrays(X, a, y, covariate_names(cfg), covariate_kinds(cfg))
    return d, truth, targets


# --------------------------------------------------------------------------- study


@dataclass
class ReplicateResult:
    """Estimates and statuses of one replicate, shaped (cells, targets, P)."""

    replicate: int
    cells: tuple                 # (method, basis) pairs
    targets: tuple
    estimates: np.ndarray
    status: np.ndarray           # status codes; -1 for a missing cell
    truth: np.ndarray            # (targets, P)
    sizes: np.ndarray            # practice sizes (0 if empty)
    errors: list = field(default_factory=list)


def _parse_cells(methods) -> tuple:
    cells = []
    for m in methods:
        if isinstance(m, str):
            name, _, basis = m.partition(":")
            basis = basis or "X"
        else:
            name, basis = m
        if basis not in BASES:
            raise ConfigError(f"unknown basis {basis!r}; choose X or Xt")
        cells.append((name, basis))
    return tuple(cells)


def run_replicate(cfg: SimConfig, cells, r: int) -> ReplicateResult:
    d, truth, targets = simulate_dataset(cfg, r)
    present = np.asarray(d.practice_labels, dtype=int) - 1
    T, M = len(cfg.targets), len(cells)
    est = np.full((M, T, cfg.P), np.nan)
    status = np.full((M, T, cfg.P), -1, dtype=np.int8)
    errors = []
    spaces = {}
    for basis in sorted({b for _, b in cells}):
        if basis == "X":
            t = raw_transform(d)
        else:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                t = fit_transform(d, TransformMode.PC_SECOND_MOMENT,
                                  max_moment_components=cfg.max_moment_components)
        spaces[basis] = Workspace(d, t)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        for ti, name in enumerate(cfg.targets):
            prof = target_sample_profile(d, targets[name], name)
            for mi, (method, basis) in enumerate(cells):
                ws = spaces[basis]
                try:
                    tab = estimate(method, d, prof, ws.t, ws=ws, se=False)
                except Exception as exc:  # a failing cell is recorded, never fatal
                    errors.append((method, basis, name, f"{type(exc).__name__}: {exc}"))
                    continue
                est[mi, ti, present] = tab.estimate
                status[mi, ti, present] = tab.status_codes
    sizes = np.bincount(np.asarray(d.practice_labels)[d.codes], minlength=cfg.P + 1)[1:]
    truth_arr = np.array([truth.conditional[name] for name in cfg.targets])
    return ReplicateResult(r, tuple(cells), cfg.targets, est, status, truth_arr, sizes, errors)


def _cache_path(cache_dir, cfg, cells, r):
    tag = hashlib.sha256((cfg.key() + repr(cells)).encode()).hexdigest()[:12]
    return Path(cache_dir) / f"rep-{tag}-{r:05d}.npz"


def _save(path: Path, res: ReplicateResult):
    tmp = path.with_name(path.name + ".tmp.npz")
    np.savez(tmp, estimates=res.estimates, status=res.status, truth=res.truth,
             sizes=res.sizes, errors=np.array(json.dumps(res.errors)))
    os.replace(tmp, path)


def _load(path: Path, cfg, cells, r) -> ReplicateResult:
    with np.load(path) as z:
        return ReplicateResult(r, tuple(cells), cfg.targets, z["estimates"], z["status"],
                               z["truth"], z["sizes"], json.loads(str(z["errors"])))


def _worker(args):
    cfg, cells, r, cache_dir = args
    res = run_replicate(cfg, cells, r)
    if cache_dir is not None:
        _save(_cache_path(cache_dir, cfg, cells, r), res)
    return res


@dataclass
class StudyResult:
    """Stacked replicate outputs; arrays shaped (replicates, cells, targets, P)."""

    config: SimConfig
    cells: tuple
    targets: tuple
    estimates: np.ndarray
    status: np.ndarray
    truth: np.ndarray            # (replicates, targets, P)
    sizes: np.ndarray            # (replicates, P)
    errors: list

    def cell(self, method: str, basis: str = "X") -> int:
        return self.cells.index((method, basis))

    def target(self, name: str) -> int:
        return self.targets.index(name)


def run_study(cfg: SimConfig, methods, *, jobs: int = 1, cache_dir=None,
              progress=None) -> StudyResult:
    """Run every replicate of ``cfg`` for ``methods`` (``"mr"``, ``"sbw-wr:Xt"``, ...).

    Replicates use independent seeded substreams, so the result does not
    depend on ``jobs``. With ``cache_dir`` each replicate is persisted when it
    finishes and reused on the next call, which makes interrupted runs resumable.
    """
    cells = _parse_cells(methods)
    if not cells:
        raise ConfigError("at least one method is required")
    todo, done = [], {}
    for r in range(cfg.replicates):
        if cache_dir is not None:
            path = _cache_path(cache_dir, cfg, cells, r)
            if path.exists():
                done[r] = _load(path, cfg, cells, r)
                continue
        todo.append(r)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
    args = [(cfg, cells, r, cache_dir) for r in todo]
    if jobs > 1 and len(args) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for res in pool.map(_worker, args):
                done[res.replicate] = res
                if progress:
                    progress(len(done), cfg.replicates)
    else:
        for a in args:
            res = _worker(a)
            done[res.replicate] = res
            if progress:
                progress(len(done), cfg.replicates)
    reps = [done[r] for r in range(cfg.replicates)]
    errors = [(res.replicate, *e) for res in reps for e in res.errors]
    return StudyResult(cfg, cells, cfg.targets,
                       np.stack([x.estimates for x in reps]),
                       np.stack([x.status for x in reps]),
                       np.stack([x.truth for x in reps]),
                       np.stack([x.sizes for x in reps]),
                       errors)


STATUS_NAMES = {s.code: s.value for s in ExtrapolationStatus}
