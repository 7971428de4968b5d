import hashlib
import json

import numpy as np
import pytest

from _helpers import random_dataset
from profileqm import io as pio
from profileqm.casemix import EstimateTable, estimate_sbw
from profileqm.core import ExtrapolationStatus, Profile, from_arrays, system_profile
from profileqm.errors import (
    ConfigError,
    DuplicatePatientId,
    EmptyDataset,
    MissingColumn,
    ParseError,
    SchemaViolation,
)
from profileqm.transform import TransformMode, fit_transform, raw_transform

S = ExtrapolationStatus


def _write(tmp_path, text, name="patients.csv"):
    path = tmp_path / name
    path.write_text(text)
    return path


SCHEMA = pio.Schema({"age": "continuous", "female": "binary"}, "y")


def test_fmt_round_trips():
    for x in (0.1, -2.5e-17, 1 / 3, 7.0, 123456789.125):
        assert float(pio.fmt(x)) == x
    assert pio.fmt(np.nan) == "" and pio.fmt(3) == "3" and pio.fmt(True) == "1"


def test_kv_parsing():
    assert pio.parse_kv("# c\na = 1\n\nb= two words\n") == {"a": "1", "b": "two words"}
    with pytest.raises(ConfigError, match=":2:"):
        pio.parse_kv("a = 1\nnonsense\n")
    with pytest.raises(ConfigError):
        pio.parse_kv("a = 1\na = 2\n")


def test_schema_round_trip_and_errors():
    schema = pio.Schema.from_kv(pio.parse_kv(SCHEMA.to_text()))
    assert schema == SCHEMA
    with pytest.raises(SchemaViolation):
        pio.Schema.from_kv({"age": "ordinal"})
    with pytest.raises(SchemaViolation):
        pio.Schema.from_kv({"outcome": "y"})


def test_default_schema_has_case_study_columns():
    schema = pio.default_schema()
    assert len(schema.kinds) == 24
    assert schema.kinds["age"] == "continuous" and schema.kinds["stage_4"] == "binary"


def test_size_filter_drops_small_practices(tmp_path):
    lines = ["patient_id,practice_id,age,female,y"]
    lines += [f"a{i},1,{70 + i},{i % 2},{i}" for i in range(30)]
    lines += [f"b{i},2,{60 + i},{i % 2},{i}" for i in range(29)]
    d = pio.read_patients(_write(tmp_path, "\n".join(lines) + "\n"), SCHEMA)
    assert d.P == 1 and d.n == 30 and d.practice_labels == (1,)
    with pytest.raises(EmptyDataset):
        pio.read_patients(_write(tmp_path, "\n".join(lines[:5]) + "\n"), SCHEMA)


def test_parse_error_reports_line(tmp_path):
    text = "patient_id,practice_id,age,female,y\np1,1,70,0,1\np2,1,old,1,2\n"
    with pytest.raises(ParseError) as info:
        pio.read_patients(_write(tmp_path, text), SCHEMA, min_size=1)
    assert info.value.line == 3 and info.value.column == "age"


def test_patient_file_errors(tmp_path):
    head = "patient_id,practice_id,age,female,y\n"
    with pytest.raises(SchemaViolation):
        pio.read_patients(_write(tmp_path, head + "p1,1,70,2,1\n"), SCHEMA, min_size=1)
    with pytest.raises(DuplicatePatientId):
        pio.read_patients(_write(tmp_path, head + "p1,1,70,0,1\np1,1,71,1,1\n"), SCHEMA,
                          min_size=1)
    with pytest.raises(MissingColumn):
        pio.read_patients(_write(tmp_path, "patient_id,practice_id,age,y\np1,1,3,4\n"), SCHEMA,
                          min_size=1)
    with pytest.raises(ParseError):
        pio.read_patients(_write(tmp_path, head + "p1,1,70\n"), SCHEMA, min_size=1)
    with pytest.raises(EmptyDataset):
        pio.read_patients(_write(tmp_path, ""), SCHEMA)


def test_dataset_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    d = random_dataset(rng, P=3, K=2, binary=1, labels=["north", 12, "south"])
    schema = pio.Schema(dict(zip(d.names, d.kinds)), "y")
    path = tmp_path / "d.csv"
    pio.write_patients(d, path, schema)
    back = pio.read_patients(path, schema, min_size=1)
    assert np.array_equal(back.covariates, d.covariates)
    assert np.array_equal(back.outcome, d.outcome)
    assert back.practice_labels == (12, "north", "south")
    assert pio.patients_csv(back, schema) == path.read_text()


@pytest.mark.parametrize("key", pio.FIXTURE_PROFILES)
def test_fixture_profiles_round_trip(tmp_path, key):
    prof = pio.fixture_profile(key)
    assert len(prof.names) == 24
    path = tmp_path / f"{key}.txt"
    pio.write_profile(prof, path)
    back = pio.read_profile(path, names=prof.names)
    assert back.names == prof.names and np.array_equal(back.values, prof.values)
    assert back.provenance is prof.provenance and back.name == prof.name


def test_fixture_patient_profiles_are_points():
    assert pio.fixture_profile("patient3")["race_black"] == 1
    assert pio.fixture_profile("patient2")["race_black"] == 0
    with pytest.raises(KeyError):
        pio.fixture_profile("patient9")


def test_profile_parse_errors():
    with pytest.raises(ParseError):
        pio.parse_profile("name,value\nage,1\n")
    with pytest.raises(ParseError):
        pio.parse_profile("covariate,value\nage,abc\n")
    with pytest.raises(SchemaViolation):
        pio.parse_profile("covariate,value\nage,1\n", names=("age", "female"))


def test_transform_file_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    d = random_dataset(rng, P=2, size=(30, 40), K=4)
    t = fit_transform(d, TransformMode.PC_SECOND_MOMENT)
    path = tmp_path / "t.txt"
    pio.write_transform(t, path)
    back = pio.read_transform(path)
    assert back.output_names == t.output_names
    assert np.array_equal(back.apply(d.covariates), t.apply(d.covariates))
    with pytest.raises(ParseError):
        pio.parse_transform("something else\n")


def test_estimate_table_with_600_practices():
    P = 600
    rng = np.random.default_rng(2)
    status = tuple(S.INFEASIBLE if p % 7 == 0 else S.INTERPOLATED for p in range(P))
    est = np.where([s is S.INFEASIBLE for s in status], np.nan, rng.normal(size=P))
    tab = EstimateTable("sbw-nonneg", "X", "system", tuple(range(1, P + 1)), est,
                        np.full(P, 0.1), status, ("",) * P)
    lines = pio.estimates_csv(tab).splitlines()
    assert len(lines) == P + 1
    assert lines[0] == "practice_id,method,basis,estimate,se,ci_lo,ci_hi,status,rank"
    first = lines[1].split(",")
    assert first[3] == "" and first[7] == "infeasible" and first[8] == ""


def test_weights_empty_for_infeasible_practices():
    X = np.array([0.0, 1.0, 2.0, 5.0, 6.0])
    d = from_arrays(X, [1, 1, 1, 2, 2], np.arange(5.0))
    tab = estimate_sbw(d, Profile("t", [1.0], d.names), raw_transform(d))
    lines = pio.weights_csv(d, tab).splitlines()
    assert lines[0] == "practice_id,patient_id,weight,status"
    assert all(line.split(",")[2] == "" for line in lines[4:])
    assert lines[4].endswith("infeasible")
    assert sum(float(line.split(",")[2]) for line in lines[1:4]) == pytest.approx(1.0)


def test_outputs_manifest(tmp_path, monkeypatch):
    manifest = pio.write_outputs({"a.txt": "hello\n", "b.bin": b"\x00\x01"}, tmp_path / "out",
                                 config={"seed": 3})
    on_disk = json.loads((tmp_path / "out" / "manifest.json").read_text())
    assert on_disk == json.loads(json.dumps(manifest))
    assert on_disk["files"]["a.txt"]["sha256"] == hashlib.sha256(b"hello\n").hexdigest()
    assert on_disk["config"] == {"seed": 3}
    monkeypatch.setenv(pio.OUTPUT_ENV, str(tmp_path / "env"))
    assert pio.default_out_dir() == tmp_path / "env"
    monkeypatch.delenv(pio.OUTPUT_ENV)
    assert str(pio.default_out_dir()) == "profileqm-out"


def test_system_profile_written_and_read(tmp_path):
    rng = np.random.default_rng(3)
    d = random_dataset(rng)
    prof = system_profile(d)
    pio.write_profile(prof, tmp_path / "p.txt")
    back = pio.read_profile(tmp_path / "p.txt", d.names)
    assert np.array_equal(back.values, prof.values)
