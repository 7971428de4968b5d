import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from profileqm import io as pio
from profileqm.core import (
    Basis,
    Dataset,
    Profile,
    Provenance,
    build_dataset,
    detect_null_covariates,
    from_arrays,
    patient_profile,
    system_profile,
    target_sample_profile,
)
from profileqm.errors import (
    ColumnMismatch,
    EmptyDataset,
    EmptyPractice,
    MissingColumn,
    NonBinaryValueInBinaryColumn,
)


def test_build_dataset_practice_index():
    rows = {"practice_id": [1, 1, 2, 2], "age": [70.0, 71.0, 80.0, 66.0],
            "female": [1, 0, 0, 1]}
    d = build_dataset(rows, {"age": "continuous", "female": "binary"})
    assert d.P == 2
    assert d.sizes.tolist() == [2, 2]
    assert d.rows_of(1).tolist() == [0, 1]
    assert d.rows_of(2).tolist() == [2, 3]


def test_binary_column_rejects_two():
    rows = {"practice_id": [1, 2], "female": [1, 2]}
    with pytest.raises(NonBinaryValueInBinaryColumn):
        build_dataset(rows, {"female": "binary"})


def test_missing_column():
    with pytest.raises(MissingColumn):
        build_dataset({"practice_id": [1]}, {"age": "continuous"})


def test_empty_practice_rejected():
    with pytest.raises(EmptyPractice):
        Dataset(np.zeros((2, 1)), ("x",), ("continuous",), np.array([1, 1]), ("a", "b"))


def test_practices_sorted_and_labels_kept():
    d = from_arrays(np.arange(6.0), ["z", 10, 2, "z", 2, 10])
    assert d.practice_labels == (2, 10, "z")
    assert d.sizes.tolist() == [2, 2, 2]
    sub = d.subset([0, 3, 4])
    assert sub.practice_labels == (2, "z")
    assert sub.assignment.tolist() == [2, 2, 1]


def test_dataset_is_read_only():
    d = from_arrays(np.arange(4.0), [1, 1, 2, 2])
    with pytest.raises(ValueError):
        d.covariates[0, 0] = 5.0


def test_case_study_schema_one_row_file():
    schema = pio.default_schema()
    prof = pio.fixture_profile("patient2")
    rows = {"practice_id": [7], "patient_id": ["p1"]}
    for name in schema.kinds:
        rows[name] = [prof[name]]
    d = build_dataset(rows, schema.kinds)
    assert d.K == 24
    assert d.n == 1 and d.P == 1


def test_system_profile_mean():
    d = from_arrays(np.array([0.0, 2.0, 4.0]), [1, 1, 2])
    prof = system_profile(d)
    assert prof.values.tolist() == [2.0]
    assert prof.provenance is Provenance.SYSTEM_MEAN


def test_system_profile_fixture_entries():
    prof = pio.fixture_profile("system")
    assert prof["age"] == pytest.approx(76.10)
    assert prof["sex_male"] == pytest.approx(0.34)


def test_single_patient_profile_is_row():
    d = from_arrays(np.array([[3.0, 1.0]]), [5], kinds=("continuous", "binary"))
    assert system_profile(d).values.tolist() == [3.0, 1.0]
    assert patient_profile(d, 0).values.tolist() == [3.0, 1.0]


def test_empty_target_sample():
    d = from_arrays(np.arange(3.0), [1, 1, 1])
    with pytest.raises(EmptyDataset):
        target_sample_profile(d, [])


def test_profile_alignment_mismatch():
    prof = Profile("p", [1.0], ("a",))
    with pytest.raises(ColumnMismatch):
        prof.aligned(("b",))


def _race_dataset():
    X = np.array([[0, 1], [0, 1], [1, 0], [0, 1]], dtype=float)
    return from_arrays(X, [1, 1, 2, 2], names=("race_black", "race_white"),
                       kinds=("binary", "binary"))


def test_null_detection_race_black():
    d = _race_dataset()
    prof = Profile("patient3", [1.0, 0.0], d.names)
    part = detect_null_covariates(d, prof)
    assert "race_black" in part.null_set(1)
    assert part.constants[0]["race_black"] == 0.0
    assert part.null_set(2) == ()


def test_constant_at_profile_value_not_null():
    d = _race_dataset()
    prof = Profile("white", [0.0, 1.0], d.names)
    assert detect_null_covariates(d, prof).null_set(1) == ()


def test_varying_covariate_never_null():
    d = from_arrays(np.array([0.0, 0.5, 3.0, 3.0]), [1, 1, 2, 2], kinds=("continuous",))
    part = detect_null_covariates(d, Profile("far", [100.0], d.names))
    assert part.null_set(1) == ()
    assert part.null_set(2) == ("X1",)


def test_null_detection_needs_raw_profile():
    d = _race_dataset()
    prof = Profile("t", [0.5, 0.5], d.names, basis=Basis.TRANSFORMED)
    with pytest.raises(ValueError):
        detect_null_covariates(d, prof)


@st.composite
def binary_datasets(draw):
    P = draw(st.integers(1, 4))
    K = draw(st.integers(1, 4))
    sizes = draw(st.lists(st.integers(1, 5), min_size=P, max_size=P))
    n = sum(sizes)
    bits = draw(st.lists(st.integers(0, 1), min_size=n * K, max_size=n * K))
    X = np.array(bits, dtype=float).reshape(n, K)
    a = np.repeat(np.arange(1, P + 1), sizes)
    target = draw(st.lists(st.sampled_from([0.0, 0.5, 1.0]), min_size=K, max_size=K))
    return from_arrays(X, a, kinds=("binary",) * K), np.array(target)


@settings(max_examples=60, deadline=None)
@given(binary_datasets())
def test_partition_and_census(data):
    d, target = data
    part = detect_null_covariates(d, Profile("t", target, d.names))
    for p in range(1, d.P + 1):
        null, nonnull = set(part.null_set(p)), set(part.nonnull_set(p))
        assert not null & nonnull
        assert null | nonnull == set(d.names)
        for nm in null:
            j = d.names.index(nm)
            col = d.covariates[d.rows_of(p), j]
            assert col.max() - col.min() <= 1e-9
            assert abs(col[0] - target[j]) > 1e-9
    assert sum(part.census.values()) == part.n_pairs


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=4), st.integers(1, 20))
def test_system_profile_of_identical_rows(row, n):
    X = np.tile(np.array(row), (n, 1))
    d = from_arrays(X, np.ones(n, dtype=int), kinds=("continuous",) * len(row))
    assert np.allclose(system_profile(d).values, row, rtol=0, atol=1e-12 * (1 + np.abs(row)))
