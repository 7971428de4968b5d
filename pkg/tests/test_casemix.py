import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _helpers import random_dataset, stationarity_solution
from profileqm.casemix import (
    METHODS,
    EstimateTable,
    Workspace,
    bootstrap_se,
    estimate,
    estimate_fe,
    estimate_layered_fe,
    estimate_layered_wr,
    estimate_mr,
    estimate_sbw,
    estimate_uncertainty,
    implied_weights,
    rank_values,
    unreachable_columns,
)
from profileqm.core import (
    ExtrapolationStatus,
    Profile,
    detect_null_covariates,
    from_arrays,
    system_profile,
    target_sample_profile,
)
from profileqm.errors import MissingOutcome, NotLinearEstimator
from profileqm.solver import SbwProblem, check_feasibility
from profileqm.transform import TransformMode, fit_transform, raw_transform

S = ExtrapolationStatus


def _quiet(fn, *args, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return fn(*args, **kwargs)


# --------------------------------------------------------------------------- FE


def test_fe_exact_linear_outcome():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(20, 2))
    d = from_arrays(X, np.repeat([1, 2], 10), X.sum(axis=1))
    prof = Profile("t", [0.7, -1.3], d.names)
    tab = estimate_fe(d, prof, raw_transform(d))
    assert np.allclose(tab.estimate, -0.6, atol=1e-12)
    assert np.allclose(tab.se, 0.0, atol=1e-12)


def test_fe_normal_equations_oracle():
    x = np.array([0.0, 1.0, 2.0, 1.0, 3.0, 4.0])
    y = np.array([1.0, 2.5, 2.9, 0.4, 2.2, 3.5])
    a = np.array([1, 1, 1, 2, 2, 2])
    d = from_arrays(x, a, y)
    D = np.column_stack([a == 1, a == 2, x]).astype(float)
    coef = np.linalg.solve(D.T @ D, D.T @ y)
    prof = Profile("t", [1.5], d.names)
    tab = estimate_fe(d, prof, raw_transform(d))
    assert np.allclose(tab.estimate, coef[:2] + coef[2] * 1.5, atol=1e-12)


def test_fe_shift_by_constant():
    rng = np.random.default_rng(1)
    d = random_dataset(rng)
    prof = system_profile(d)
    t = raw_transform(d)
    a = estimate_fe(d, prof, t).estimate
    b = estimate_fe(d.with_outcome(d.outcome + 3.25), prof, t).estimate
    assert np.allclose(b - a, 3.25, atol=1e-10)


# --------------------------------------------------------------------------- MR


def test_mr_singular_practice_recorded():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(13, 2))
    d = from_arrays(X, [1] * 10 + [2] * 3, rng.normal(size=13))
    tab = estimate_mr(d, system_profile(d), raw_transform(d))
    assert tab.status[0] is not S.INFEASIBLE
    # three patients and three coefficients is fine; two are not
    d2 = from_arrays(X[:12], [1] * 10 + [2] * 2, d.outcome[:12])
    tab2 = estimate_mr(d2, system_profile(d2), raw_transform(d2))
    assert tab2.status[1] is S.INFEASIBLE and np.isnan(tab2.estimate[1])
    assert "singular" in tab2.reasons[1]
    with pytest.raises(NotLinearEstimator):
        tab2.implied_weights(2)


def test_mr_two_point_regression_oracle():
    x = np.array([1.0, 2.0, 4.0, 7.0, 0.0, 1.0, 3.0])
    y = np.array([2.0, 2.5, 5.0, 6.0, -1.0, 0.5, 0.0])
    d = from_arrays(x, [1, 1, 1, 1, 2, 2, 2], y)
    tab = estimate_mr(d, Profile("t", [2.5], d.names), raw_transform(d))
    for p, rows in ((1, slice(0, 4)), (2, slice(4, 7))):
        slope, icpt = np.polyfit(x[rows], y[rows], 1)
        assert abs(tab.estimate[p - 1] - (icpt + slope * 2.5)) <= 1e-10


def test_mr_implied_weights_closed_form():
    rng = np.random.default_rng(3)
    d = random_dataset(rng, P=2, K=2)
    prof = Profile("t", [0.2, -0.1], d.names)
    tab = estimate_mr(d, prof, raw_transform(d))
    rows = d.rows_of(1)
    Xp = np.column_stack([np.ones(rows.size), d.covariates[rows]])
    xs = np.array([1.0, 0.2, -0.1])
    c = xs @ np.linalg.solve(Xp.T @ Xp, Xp.T)
    got = implied_weights(tab, 1)
    assert np.allclose(got[rows], c, atol=1e-12)
    assert np.all(np.delete(got, rows) == 0)
    assert abs(got @ d.outcome - tab.estimate[0]) <= 1e-10


def test_mr_single_patient_with_generalized_inverse():
    X = np.array([[0.0, 1.0], [1.0, 3.0], [2.0, 2.0], [3.0, 0.5], [5.0, 5.0]])
    y = np.array([1.0, 2.0, 3.0, 1.5, 9.0])
    d = from_arrays(X, [1, 1, 1, 1, 2], y)
    prof = system_profile(d)
    assert estimate_mr(d, prof, raw_transform(d)).status[1] is S.INFEASIBLE
    tab = _quiet(estimate_mr, d, prof, raw_transform(d), pinv=True)
    c = tab.implied_weights(2)
    assert np.array_equal(c, [0, 0, 0, 0, 1.0])
    assert tab.estimate[1] == 9.0


# --------------------------------------------------------------------------- SBW


def test_sbw_uniform_weights_give_practice_mean():
    X = np.array([-1.0, 0.0, 1.0, 5.0, 6.0, 9.0])
    y = np.array([3.0, 4.0, 8.0, 1.0, 2.0, 2.0])
    d = from_arrays(X, [1, 1, 1, 2, 2, 2], y)
    prof = target_sample_profile(d, d.rows_of(1))
    tab = estimate_sbw(d, prof, raw_transform(d), nonneg=True)
    assert tab.estimate[0] == pytest.approx(5.0, abs=1e-12)
    assert np.allclose(tab.weights[0], 1 / 3)
    assert tab.status[1] is S.INFEASIBLE


def test_sbw_extrapolated_estimate_leaves_range():
    d = from_arrays(np.array([0.0, 1.0]), [1, 1], np.array([5.0, 7.0]))
    prof = Profile("t", [2.0], d.names)
    free = estimate_sbw(d, prof, raw_transform(d), nonneg=False)
    assert free.estimate[0] == pytest.approx(9.0, abs=1e-12)
    assert free.status[0] is S.EXTRAPOLATED
    nn = estimate_sbw(d, prof, raw_transform(d), nonneg=True)
    assert nn.status[0] is S.INFEASIBLE and np.isnan(nn.estimate[0])


def test_sbw_three_patient_grid_oracle():
    y = np.array([4.0, -1.0, 2.5])
    d = from_arrays(np.array([0.0, 1.0, 3.0]), [1, 1, 1], y)
    tab = estimate_sbw(d, Profile("t", [2.0], d.names), raw_transform(d), nonneg=False)
    s = np.arange(-2.0, 2.0, 1e-3)
    W = np.array([0.0, 0.5, 0.5]) + s[:, None] * np.array([2.0, -3.0, 1.0])
    best = W[np.argmin(((W - 1 / 3) ** 2).sum(axis=1))]
    assert abs(tab.estimate[0] - best @ y) < 1e-2


# --------------------------------------------------------------------------- layered


def test_layered_fe_without_nulls_equals_unrestricted_sbw(kernel):
    rng = np.random.default_rng(4)
    d = random_dataset(rng, P=4, K=2)
    prof = system_profile(d)
    t = raw_transform(d)
    a = estimate_layered_fe(d, prof, t, kernel=kernel).estimate
    b = estimate_sbw(d, prof, t, nonneg=False, kernel=kernel).estimate
    assert np.abs(a - b).max() <= 1e-10


def _null_design(rng, noise=0.0):
    # practice 1 never has z = 1; practice 2 mixes both levels
    n1, n2 = 12, 14
    x = rng.normal(size=n1 + n2)
    z = np.concatenate([np.zeros(n1), (np.arange(n2) % 2).astype(float)])
    a = np.repeat([1, 2], [n1, n2])
    alpha = np.where(a == 1, 1.5, -0.5)
    y = 2.0 * z + alpha + noise * rng.normal(size=n1 + n2)
    d = from_arrays(np.column_stack([x, z]), a, y, names=("x", "z"),
                    kinds=("continuous", "binary"))
    return d, Profile("t", [0.3, 1.0], d.names)


def test_layered_fe_correction_formula():
    d, prof = _null_design(np.random.default_rng(5))
    assert detect_null_covariates(d, prof).null_set(1) == ("z",)
    tab = _quiet(estimate_layered_fe, d, prof, raw_transform(d))
    rows = d.rows_of(1)
    hajek = tab.weights[0] @ d.outcome[rows]
    assert tab.estimate[0] == pytest.approx(hajek + 2.0 * (1.0 - 0.0), abs=1e-10)
    assert tab.estimate[0] == pytest.approx(3.5, abs=1e-10)


def test_layered_fe_two_step_oracle():
    rng = np.random.default_rng(6)
    d, prof = _null_design(rng, noise=0.7)
    tab = _quiet(estimate_layered_fe, d, prof, raw_transform(d))
    X, y = d.covariates, d.outcome
    r1, r2 = d.rows_of(1), d.rows_of(2)
    target = prof.values
    w = np.empty(d.n)
    w[r1] = stationarity_solution(X[r1][:, [0]], target[[0]])
    w[r2] = stationarity_solution(X[r2], target)
    D = np.column_stack([np.repeat([1.0, 0.0], [12, 14]), np.repeat([0.0, 1.0], [12, 14]),
                         X[:, 1], w])
    coef = np.linalg.lstsq(D, y, rcond=None)[0]
    expected1 = w[r1] @ y[r1] + coef[2] * (target[1] - 0.0)
    expected2 = w[r2] @ y[r2]
    assert tab.estimate[0] == pytest.approx(expected1, abs=1e-10)
    assert tab.estimate[1] == pytest.approx(expected2, abs=1e-10)
    c = tab.implied_weights(1)
    assert abs(c @ y - tab.estimate[0]) <= 1e-10 and abs(c.sum() - 1) <= 1e-10


def test_layered_fe_literal_mode_averages_fitted_values():
    rng = np.random.default_rng(7)
    d, prof = _null_design(rng, noise=0.7)
    tab = _quiet(estimate_layered_fe, d, prof, raw_transform(d), mode="literal")
    # with practice indicators the mean fitted value is the mean outcome
    for p in (1, 2):
        assert tab.estimate[p - 1] == pytest.approx(d.outcome[d.rows_of(p)].mean(), abs=1e-10)
    with pytest.raises(ValueError):
        estimate_layered_fe(d, prof, raw_transform(d), mode="other")


def test_unreachable_one_hot_sibling():
    # no patient in the middle level; the other two always sum to one
    Bp = np.array([[1, 0, 0], [0, 0, 1], [1, 0, 0], [0, 0, 1]], dtype=float)
    assert unreachable_columns(Bp, np.array([0.82, 0.08, 0.10])).tolist() == [False, True, True]
    assert unreachable_columns(Bp, np.array([0.4, 0.0, 0.6])).tolist() == [False, False, False]


def test_layered_methods_handle_missing_levels_without_fallback():
    rng = np.random.default_rng(8)
    n = 60
    level = rng.integers(0, 3, size=n)
    a = np.repeat([1, 2, 3], 20)
    level[a == 1] = np.where(level[a == 1] == 1, 0, level[a == 1])
    H = np.eye(3)[level]
    x = rng.normal(size=n)
    d = from_arrays(np.column_stack([x, H]), a, x + level + rng.normal(size=n),
                    names=("x", "white", "black", "other"),
                    kinds=("continuous", "binary", "binary", "binary"))
    prof = system_profile(d)
    with warnings.catch_warnings():
        warnings.simplefilter("error", UserWarning)
        warnings.simplefilter("ignore", DeprecationWarning)
        from profileqm.errors import RankDeficientDesign
        warnings.simplefilter("ignore", RankDeficientDesign)
        fe = estimate_layered_fe(d, prof, raw_transform(d))
        wr = estimate_layered_wr(d, prof, raw_transform(d))
    assert fe.n_estimated == wr.n_estimated == 3
    for p in range(1, 4):
        assert abs(fe.implied_weights(p) @ d.outcome - fe.estimate[p - 1]) <= 1e-10


def test_layered_wr_uniform_weights_reduce_to_fe():
    rng = np.random.default_rng(9)
    X1 = rng.normal(size=(10, 2))
    X = np.vstack([X1, X1[::-1]])
    d = from_arrays(X, np.repeat([1, 2], 10), rng.normal(size=20))
    prof = system_profile(d)
    t = raw_transform(d)
    wr = estimate_layered_wr(d, prof, t)
    assert all(np.allclose(w, 0.1) for w in wr.weights)
    assert np.abs(wr.estimate - estimate_fe(d, prof, t).estimate).max() <= 1e-10


def test_layered_wr_truncates_negative_weights():
    x = np.array([-5.0, 1.0, 4.0, 0.0, 5.0, 10.0, 15.0])
    d = from_arrays(x, [1, 1, 1, 2, 2, 2, 2], np.arange(7.0))
    tab = estimate_layered_wr(d, Profile("t", [7.0], d.names), raw_transform(d))
    assert np.allclose(tab.weights[0], [0.0, 0.5, 1.0], atol=1e-12)


# --------------------------------------------------------------------------- implied weights


@pytest.mark.parametrize("method", ["fe", "mr", "sbw", "sbw-fe", "sbw-wr"])
def test_implied_weights_identity(method):
    rng = np.random.default_rng(10)
    for _ in range(10):
        d = random_dataset(rng, P=3, K=2, binary=1)
        prof = system_profile(d)
        tab = _quiet(estimate, method, d, prof, raw_transform(d))
        for p in range(1, d.P + 1):
            if tab.estimated[p - 1]:
                c = tab.implied_weights(p)
                assert abs(c @ d.outcome - tab.estimate[p - 1]) <= 1e-8
                assert abs(c.sum() - 1) <= 1e-10


def test_status_follows_implied_weight_signs():
    rng = np.random.default_rng(11)
    d = random_dataset(rng, P=4, K=2)
    prof = Profile("far", [3.0, -3.0], d.names)
    for method in ("fe", "mr", "sbw-wr"):
        tab = _quiet(estimate, method, d, prof, raw_transform(d))
        for p in range(1, d.P + 1):
            neg = tab.implied_weights(p).min() < -1e-12
            assert tab.status[p - 1] is (S.EXTRAPOLATED if neg else S.INTERPOLATED)


# --------------------------------------------------------------------------- uncertainty


def test_constant_outcome_has_zero_se():
    rng = np.random.default_rng(12)
    d = random_dataset(rng, P=3, K=1)
    d = d.with_outcome(np.full(d.n, 0.4))
    for method in METHODS:
        tab = _quiet(estimate, method, d, system_profile(d), raw_transform(d))
        ok = tab.estimated
        assert np.allclose(tab.se[ok], 0.0, atol=1e-10)
        assert np.allclose(tab.estimate[ok], 0.4, atol=1e-10)


def test_uniform_hajek_se_matches_mean_se():
    rng = np.random.default_rng(13)
    x = rng.normal(size=25)
    y = rng.normal(size=25)
    d = from_arrays(x, np.ones(25, dtype=int), y)
    tab = estimate_sbw(d, system_profile(d), raw_transform(d))
    n = 25
    classical = y.std(ddof=1) / np.sqrt(n)
    assert tab.se[0] == pytest.approx(np.sqrt((n - 1) / n) * classical, rel=1e-12)


@pytest.mark.parametrize("method", ["sbw-nonneg", "mr"])
def test_bootstrap_agrees_with_analytic(method):
    rng = np.random.default_rng(14)
    n = 200
    x = rng.normal(size=n)
    y = 0.3 * x + rng.normal(size=n)
    d = from_arrays(x, np.ones(n, dtype=int), y)
    prof = Profile("t", [0.1], d.names)
    t = raw_transform(d)
    tab = estimate(method, d, prof, t)
    boot = estimate_uncertainty(tab, d, bootstrap=400, t=t, profile=prof, seed=3)
    assert abs(boot.se[0] / tab.se[0] - 1) < 0.15
    assert np.array_equal(boot.estimate, tab.estimate)


def test_bootstrap_on_transformed_basis_and_determinism():
    rng = np.random.default_rng(15)
    d = random_dataset(rng, P=2, size=(40, 50), K=3)
    t = _quiet(fit_transform, d, TransformMode.PC_SECOND_MOMENT)
    prof = system_profile(d)
    a = _quiet(bootstrap_se, "sbw-wr", d, prof, t, reps=20, seed=1)
    b = _quiet(bootstrap_se, "sbw-wr", d, prof, t, reps=20, seed=1)
    assert np.array_equal(a, b) and np.all(a > 0)


def test_uncertainty_level_changes_interval():
    rng = np.random.default_rng(16)
    d = random_dataset(rng)
    tab = estimate_fe(d, system_profile(d), raw_transform(d))
    wide = estimate_uncertainty(tab, d, level=0.99)
    assert np.all(wide.ci[1] - wide.ci[0] > tab.ci[1] - tab.ci[0])
    with pytest.raises(ValueError):
        estimate_uncertainty(tab, d, bootstrap=5)


# --------------------------------------------------------------------------- tables


def test_rank_values_and_table_rows():
    assert rank_values(np.array([0.3, np.nan, 0.1, 0.3])).tolist() == [2, 0, 1, 3]
    rng = np.random.default_rng(17)
    d = random_dataset(rng, P=4, labels=["d", "c", "b", "a"])
    tab = estimate_sbw(d, Profile("far", [2.0, 2.0], d.names), raw_transform(d))
    rows = list(tab.rows())
    assert [r["practice_id"] for r in rows] == ["a", "b", "c", "d"]
    assert list(rows[0]) == ["practice_id", "method", "basis", "estimate", "se", "ci_lo",
                             "ci_hi", "status", "rank"]
    assert tab.n_estimated + tab.n_skipped == 4
    assert sum(tab.counts().values()) == 4


def test_errors():
    rng = np.random.default_rng(18)
    d = random_dataset(rng, outcome=False)
    with pytest.raises(MissingOutcome):
        estimate_fe(d, system_profile(d), raw_transform(d))
    d = random_dataset(rng)
    with pytest.raises(ValueError):
        estimate("ridge", d, system_profile(d), raw_transform(d))
    tab = EstimateTable("x", "X", "p", ("a",), np.array([1.0]), np.array([0.1]),
                        (S.INTERPOLATED,), ("",))
    with pytest.raises(NotLinearEstimator):
        tab.implied_weights(1)


def test_workspace_reuse_matches_fresh_estimates():
    rng = np.random.default_rng(19)
    d = random_dataset(rng, P=3, K=2, binary=1)
    t = raw_transform(d)
    ws = Workspace(d, t)
    for prof in (system_profile(d), target_sample_profile(d, d.rows_of(2))):
        for method in METHODS:
            a = _quiet(estimate, method, d, prof, t, ws=ws).estimate
            b = _quiet(estimate, method, d, prof, t).estimate
            assert np.array_equal(np.isnan(a), np.isnan(b))
            assert np.nanmax(np.abs(a - b), initial=0) <= 1e-12


# --------------------------------------------------------------------------- properties


@st.composite
def small_systems(draw):
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    d = random_dataset(rng, P=draw(st.integers(1, 4)), size=(6, 12), K=draw(st.integers(1, 2)),
                       binary=draw(st.integers(0, 1)))
    if draw(st.booleans()) and d.K > 1 and "binary" in d.kinds:
        # force a null indicator in the first practice
        X = d.covariates.copy()
        X[d.rows_of(1), -1] = 0.0
        d = from_arrays(X, d.assignment, d.outcome, d.names, d.kinds)
    return d, draw(st.floats(-50, 50))


@settings(max_examples=25, deadline=None)
@given(small_systems())
def test_location_equivariance_and_ranks(data):
    d, c = data
    prof = system_profile(d)
    t = raw_transform(d)
    for method in METHODS:
        a = _quiet(estimate, method, d, prof, t)
        b = _quiet(estimate, method, d.with_outcome(d.outcome + c), prof, t)
        assert np.array_equal(a.estimated, b.estimated)
        assert np.nanmax(np.abs(b.estimate - a.estimate - c), initial=0) <= 1e-8
        # nan exactly where infeasible; intervals contain estimates
        assert np.array_equal(~a.estimated, a.status_codes == S.INFEASIBLE.code)
        lo, hi = a.ci
        ok = a.estimated
        assert np.all((lo[ok] <= a.estimate[ok]) & (a.estimate[ok] <= hi[ok]))
        r = a.ranks[ok]
        assert sorted(r.tolist()) == list(range(1, ok.sum() + 1))


@settings(max_examples=25, deadline=None)
@given(small_systems())
def test_null_consistency_and_sample_bounds(data):
    d, _ = data
    prof = system_profile(d)
    t = raw_transform(d)
    tab = estimate_sbw(d, prof, t, nonneg=True)
    part = detect_null_covariates(d, prof)
    target = prof.values
    for p in range(1, d.P + 1):
        rows = d.rows_of(p)
        expect_infeasible = bool(part.null_set(p)) or \
            not check_feasibility(SbwProblem(d.covariates[rows], target))
        assert (tab.status[p - 1] is S.INFEASIBLE) == expect_infeasible
        if tab.estimated[p - 1]:
            yp = d.outcome[rows]
            assert yp.min() - 1e-10 <= tab.estimate[p - 1] <= yp.max() + 1e-10


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.integers(4, 15))
def test_degenerate_agreement(seed, n):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, 2))
    y = rng.normal(size=n)
    d = from_arrays(X, np.ones(n, dtype=int), y)
    prof = system_profile(d)
    for method in METHODS:
        tab = _quiet(estimate, method, d, prof, raw_transform(d))
        assert tab.estimate[0] == pytest.approx(y.mean(), abs=1e-8)
