"""File formats: patient CSVs, schemas, profiles, transforms, weights and manifests.

Tables are RFC-4180 CSV; schemas and configs are flat ``key = value`` text
with ``#`` comments. Floats are written in their shortest round-trip form.
"""

from __future__ import annotations

import csv
import hashlib
import io as _io
import json
import logging
import os
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .core import BINARY, KINDS, Basis, Dataset, Profile, Provenance, _sort_key
from .errors import (
    ConfigError,
    DuplicatePatientId,
    EmptyDataset,
    MissingColumn,
    ParseError,
    SchemaViolation,
)
from .transform import Transform, TransformMode

log = logging.getLogger(__name__)

RESERVED = ("patient_id", "practice_id", "outcome")
OUTPUT_ENV = "PROFILEQM_OUT"
TRANSFORM_MAGIC = "profileqm-transform 1"


def fmt(x) -> str:
    """Shortest round-trip text for a number; empty for missing."""
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        x = float(x)
        if not np.isfinite(x):
            return "" if np.isnan(x) else repr(x)
        if x == int(x) and abs(x) < 1e15:
            return str(int(x))
        return repr(x)
    return str(x)


def _csv_text(header, rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fmt(v) for v in r])
    return buf.getvalue()


# --------------------------------------------------------------------------- key = value


def parse_kv(text: str, source: str = "<text>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    return parse_kv(text, str(path))


@dataclass(frozen=True)
class Schema:
    """Column roles of a patient file; ``kinds`` fixes the covariate order."""

    kinds: dict
    outcome: str | None = None
    patient_id: str = "patient_id"
    practice_id: str = "practice_id"

    @classmethod
    def from_kv(cls, kv: dict, source: str = "<schema>") -> "Schema":
        kinds = {}
        for key, value in kv.items():
            if key in RESERVED:
                continue
            if value not in KINDS:
                raise SchemaViolation(f"{source}: column {key!r} has kind {value!r}; "
                                      f"expected one of {KINDS}")
            kinds[key] = value
        if not kinds:
            raise SchemaViolation(f"{source}: no covariate columns declared")
        return cls(kinds, kv.get("outcome") or None, kv.get("patient_id", "patient_id"),
                   kv.get("practice_id", "practice_id"))

    def to_text(self) -> str:
        lines = [f"patient_id = {self.patient_id}", f"practice_id = {self.practice_id}"]
        if self.outcome:
            lines.append(f"outcome = {self.outcome}")
        lines += [f"{k} = {v}" for k, v in self.kinds.items()]
        return "\n".join(lines) + "\n"


def read_schema(path) -> Schema:
    return Schema.from_kv(read_kv(path), str(path))


def default_schema() -> Schema:
    """The case-study covariate dictionary shipped with the package."""
    text = resources.files("profileqm").joinpath("data/case_study_schema.txt").read_text()
    return Schema.from_kv(parse_kv(text, "case_study_schema.txt"), "case_study_schema.txt")


# --------------------------------------------------------------------------- patients


def _number(cell: str, line: int, column: str) -> float:
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"not a number: {cell!r}", line, column) from None
    if not np.isfinite(v):
        raise ParseError(f"non-finite value: {cell!r}", line, column)
    return v


def read_patients(path, schema: Schema, min_size: int = 30) -> Dataset:
    """Parse a patient CSV and drop practices with fewer than ``min_size`` patients."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyDataset(f"{path}: empty file") from None
        header = [h.strip() for h in header]
        if len(set(header)) != len(header):
            raise SchemaViolation(f"{path}: duplicate header names")
        pos = {h: j for j, h in enumerate(header)}
        needed = [schema.patient_id, schema.practice_id, *schema.kinds]
        if schema.outcome:
            needed.append(schema.outcome)
        for name in needed:
            if name not in pos:
                raise MissingColumn(f"{path}: column {name!r} not found")
        names = list(schema.kinds)
        cov_pos = [pos[nm] for nm in names]
        X, ids, labels, y = [], [], [], []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", lineno, None)
            pid = row[pos[schema.patient_id]].strip()
            if pid in seen:
                raise DuplicatePatientId(f"{path}: line {lineno}: patient {pid!r} repeated")
            seen.add(pid)
            vals = []
            for nm, j in zip(names, cov_pos):
                v = _number(row[j].strip(), lineno, nm)
                if schema.kinds[nm] == BINARY and v not in (0.0, 1.0):
                    raise SchemaViolation(f"{path}: line {lineno}: binary column {nm!r} "
                                          f"holds {row[j]!r}")
                vals.append(v)
            if schema.outcome:
                y.append(_number(row[pos[schema.outcome]].strip(), lineno, schema.outcome))
            X.append(vals)
            ids.append(pid)
            labels.append(_label(row[pos[schema.practice_id]].strip()))
    if not X:
        raise EmptyDataset(f"{path}: no patient rows")
    X = np.array(X, dtype=float)
    labels_arr = np.array(labels, dtype=object)
    uniq = sorted(set(labels), key=_sort_key)
    counts = {lab: 0 for lab in uniq}
    for lab in labels:
        counts[lab] += 1
    kept = [lab for lab in uniq if counts[lab] >= min_size]
    dropped = [lab for lab in uniq if counts[lab] < min_size]
    log.info("read %d patients in %d practices from %s; dropped %d practices below %d patients "
             "(%d patients)", len(labels), len(uniq), path, len(dropped), min_size,
             sum(counts[lab] for lab in dropped))
    if not kept:
        raise EmptyDataset(f"{path}: no practice has at least {min_size} patients")
    dense = {lab: p for p, lab in enumerate(kept, start=1)}
    mask = np.array([lab in dense for lab in labels])
    assignment = np.array([dense[lab] for lab in labels_arr[mask]], dtype=np.int64)
    outcome = np.array(y)[mask] if schema.outcome else None
    return Dataset(X[mask], tuple(names), tuple(schema.kinds[nm] for nm in names), assignment,
                   tuple(kept), outcome, tuple(np.array(ids, dtype=object)[mask].tolist()))


def _label(text: str):
    try:
        v = int(text)
        return v
    except ValueError:
        return text


def patients_csv(d: Dataset, schema: Schema | None = None) -> str:
    pid = schema.patient_id if schema else "patient_id"
    prac = schema.practice_id if schema else "practice_id"
    out_name = (schema.outcome if schema and schema.outcome else "outcome")
    header = [pid, prac, *d.names] + ([out_name] if d.outcome is not None else [])
    ids = d.patient_ids or tuple(range(1, d.n + 1))
    rows = []
    for i in range(d.n):
        r = [ids[i], d.practice_labels[d.assignment[i] - 1], *d.covariates[i].tolist()]
        if d.outcome is not None:
            r.append(d.outcome[i])
        rows.append(r)
    return _csv_text(header, rows)


def write_patients(d: Dataset, path, schema: Schema | None = None) -> None:
    Path(path).write_text(patients_csv(d, schema), encoding="utf-8")


# --------------------------------------------------------------------------- profiles


def profile_text(profile: Profile) -> str:
    head = [f"# name = {profile.name}", f"# basis = {profile.basis.value}",
            f"# provenance = {profile.provenance.value}"]
    return "\n".join(head) + "\n" + _csv_text(["covariate", "value"],
                                             zip(profile.names, profile.values.tolist()))


def parse_profile(text: str, names=None, source: str = "<profile>") -> Profile:
    meta, body = {}, []
    for line in text.splitlines():
        if line.startswith("#"):
            key, sep, value = line[1:].partition("=")
            if sep:
                meta[key.strip()] = value.strip()
        elif line.strip():
            body.append(line)
    rows = list(csv.reader(body))
    if not rows or [c.strip() for c in rows[0]] != ["covariate", "value"]:
        raise ParseError("profile table must start with 'covariate,value'", None, None)
    pnames, values = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != 2:
            raise ParseError("expected two fields", lineno, None)
        nm = row[0].strip()
        if names is not None and nm not in names:
            raise SchemaViolation(f"{source}: unknown covariate {nm!r}")
        pnames.append(nm)
        values.append(_number(row[1].strip(), lineno, "value"))
    if names is not None:
        missing = [nm for nm in names if nm not in pnames]
        if missing:
            raise SchemaViolation(f"{source}: profile lacks {missing}")
    try:
        basis = Basis(meta.get("basis", Basis.RAW.value))
        prov = Provenance(meta.get("provenance", Provenance.CUSTOM.value))
    except ValueError as exc:
        raise ParseError(str(exc), None, None) from None
    point = np.array(values) if prov is Provenance.SINGLE_PATIENT else None
    return Profile(meta.get("name", Path(source).stem), values, pnames, basis, prov, point=point)


def read_profile(path, names=None) -> Profile:
    return parse_profile(Path(path).read_text(encoding="utf-8"), names, str(path))


def write_profile(profile: Profile, path) -> None:
    Path(path).write_text(profile_text(profile), encoding="utf-8")


FIXTURE_PROFILES = ("system", "patient1", "patient2", "patient3")


def fixture_profile(key: str) -> Profile:
    """One of the shipped case-study profiles (values as published)."""
    if key not in FIXTURE_PROFILES:
        raise KeyError(f"unknown fixture {key!r}; available: {FIXTURE_PROFILES}")
    text = resources.files("profileqm").joinpath(f"data/profiles/{key}.txt").read_text()
    return parse_profile(text, source=f"{key}.txt")


def fixture_transition() -> tuple[np.ndarray, list]:
    """Published quintile transition counts between two single-patient profiles."""
    text = resources.files("profileqm").joinpath("data/transition_patient2_patient3.csv").read_text()
    rows = list(csv.reader(_io.StringIO(text)))
    labels = rows[0][1:]
    counts = np.array([[int(c) for c in r[1:]] for r in rows[1:]], dtype=np.int64)
    return counts, labels


def edges_from_labels(labels) -> np.ndarray:
    return np.array([int(lab.rstrip("]").split(",")[1]) for lab in labels])


# --------------------------------------------------------------------------- transforms


def transform_text(t: Transform) -> str:
    def vec(a):
        return " ".join(fmt(float(x)) for x in np.ravel(a))

    lines = [TRANSFORM_MAGIC,
             f"mode = {t.mode.value}",
             f"threshold = {fmt(t.threshold)}",
             f"names = {' '.join(t.names)}",
             f"mean = {vec(t.mean)}",
             f"sd = {vec(t.sd)}",
             f"pca_columns = {' '.join(str(int(j)) for j in t.pca_columns)}",
             f"components = {t.m}",
             f"loadings = {vec(t.loadings)}",
             f"explained = {vec(t.explained)}",
             f"max_moment_components = {'' if t.max_moment_components is None else t.max_moment_components}"]
    return "\n".join(lines) + "\n"


def parse_transform(text: str) -> Transform:
    lines = text.splitlines()
    if not lines or lines[0].strip() != TRANSFORM_MAGIC:
        raise ParseError("not a transform file (bad version line)", 1, None)
    kv = {}
    for line in lines[1:]:
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()

    def vec(key):
        return np.array([float(x) for x in kv[key].split()]) if kv.get(key) else np.zeros(0)

    names = tuple(kv["names"].split())
    cols = np.array([int(x) for x in kv["pca_columns"].split()], dtype=int)
    m = int(kv["components"])
    loadings = vec("loadings").reshape(cols.size, m) if m else np.zeros((cols.size, 0))
    mmc = kv.get("max_moment_components") or None
    return Transform(names, TransformMode(kv["mode"]), float(kv["threshold"]), vec("mean"),
                     vec("sd"), cols, loadings, vec("explained"),
                     None if mmc is None else int(mmc))


def write_transform(t: Transform, path) -> None:
    Path(path).write_text(transform_text(t), encoding="utf-8")


def read_transform(path) -> Transform:
    return parse_transform(Path(path).read_text(encoding="utf-8"))


# --------------------------------------------------------------------------- results


def estimates_csv(table) -> str:
    from .casemix import CSV_COLUMNS
    return _csv_text(CSV_COLUMNS, ([r[c] for c in CSV_COLUMNS] for r in table.rows()))


def weights_csv(d: Dataset, table) -> str:
    """One row per patient: practice, patient id, weight (empty if infeasible), status."""
    ids = d.patient_ids or tuple(range(1, d.n + 1))
    rows = []
    for p, rows_p in enumerate(d.practice_index, start=1):
        w = table.weights[p - 1] if table.weights is not None else None
        st = table.status[p - 1].value
        for k, i in enumerate(rows_p):
            rows.append([d.practice_labels[p - 1], ids[i], None if w is None else w[k], st])
    return _csv_text(["practice_id", "patient_id", "weight", "status"], rows)


def default_out_dir(fallback="profileqm-out") -> Path:
    return Path(os.environ.get(OUTPUT_ENV) or fallback)


def write_outputs(artifacts: dict, out_dir, config: dict | None = None) -> dict:
    """Write named text/bytes artifacts plus ``manifest.json`` with sha256 hashes."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(artifacts):
        data = artifacts[name]
        blob = data.encode("utf-8") if isinstance(data, str) else bytes(data)
        (out / name).write_bytes(blob)
        files[name] = {"sha256": hashlib.sha256(blob).hexdigest(), "bytes": len(blob)}
    manifest = {"version": __version__, "files": files, "config": config or {}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True,
                                                  default=str) + "\n", encoding="utf-8")
    return manifest
