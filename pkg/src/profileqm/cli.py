"""Command-line interface: ``profileqm {simulate,estimate,rank,balance,map}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error. Failures
print a one-line JSON record on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import io as pio
from .casemix import METHODS, estimate, estimate_uncertainty, rank_values
from .core import Basis, _sort_key, detect_null_covariates, system_profile
from .errors import ConfigError, ProfileQMError
from .metrics import (
    ExtrapolationMap,
    balance_table,
    build_report,
    churn_summary,
    quintile_transition,
    rank_scatter_svg,
    study_maps,
)
from .simulate import TARGETS, SimConfig, run_study
from .solver import BACKEND
from .transform import TransformMode, balance_functions, fit_transform, raw_transform

log = logging.getLogger("profileqm")

DEFAULT_SIM_METHODS = "fe:X,mr:X,sbw-nonneg:X,sbw-fe:X,sbw-wr:X,fe:Xt,mr:Xt,sbw-nonneg:Xt,sbw-fe:Xt,sbw-wr:Xt"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _csv_list(text):
    return [s.strip() for s in text.split(",") if s.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="profileqm", description="Profile-targeted quality measurement of "
                "provider organizations with stable balancing weights.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="key = value file supplying any flag")
        sp.add_argument("--out", help=f"output directory (default ${pio.OUTPUT_ENV} or ./profileqm-out)")

    s = sub.add_parser("simulate", help="run the simulation study")
    common(s)
    s.add_argument("--setting", type=int, default=1)
    s.add_argument("--covariates", type=int, default=10)
    s.add_argument("--replicates", type=int, default=100)
    s.add_argument("--n", type=int, default=10000)
    s.add_argument("--practices", type=int, default=100)
    s.add_argument("--seed", type=int, default=20240101)
    s.add_argument("--methods", default=DEFAULT_SIM_METHODS,
                   help="comma list of method:basis, e.g. 'mr:X,sbw-wr:Xt'")
    s.add_argument("--targets", default=",".join(TARGETS))
    s.add_argument("--setting3-variant", default=None,
                   help="numpy expression replacing the setting-3 mean function")
    s.add_argument("--setting4-printed", action="store_true",
                   help="centre X3^2 by 1 in setting 4 as usually printed (shifts its truths)")
    s.add_argument("--max-moment-components", type=int, default=None)
    s.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    s.add_argument("--cache", default=None, help="directory for resumable per-replicate results")
    s.add_argument("--raw", action="store_true", help="also write per-cell estimates")
    s.add_argument("--svg", action="store_true", help="also render extrapolation maps as SVG")

    e = sub.add_parser("estimate", help="estimate practice quality for one profile")
    common(e)
    e.add_argument("--data", required=True)
    e.add_argument("--schema", default=None, help="schema file (default: shipped case-study schema)")
    e.add_argument("--profile", default="system",
                   help="profile file, a shipped fixture name, or 'system'")
    e.add_argument("--method", default="sbw-nonneg", choices=METHODS)
    e.add_argument("--basis", default="X", choices=("X", "Xt"))
    e.add_argument("--delta", type=float, default=0.0,
                   help="balance tolerance as a fraction of the target sample's sd")
    e.add_argument("--mode", default="profile_corrected", choices=("profile_corrected", "literal"))
    e.add_argument("--min-size", type=int, default=30)
    e.add_argument("--bootstrap", type=int, default=0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--pinv", action="store_true", help="generalized-inverse fits for singular MR designs")

    r = sub.add_parser("rank", help="compare rankings under two profiles")
    common(r)
    r.add_argument("--a", help="estimate table (CSV) under profile A")
    r.add_argument("--b", help="estimate table (CSV) under profile B")
    r.add_argument("--matrix", help="transition matrix CSV to summarize instead")
    r.add_argument("--fixture", action="store_true", help="summarize the shipped transition fixture")

    b = sub.add_parser("balance", help="covariate balance before and after weighting")
    common(b)
    b.add_argument("--data", required=True)
    b.add_argument("--schema", default=None)
    b.add_argument("--profile", default="system")
    b.add_argument("--weights", required=True, help="weights CSV written by 'estimate'")
    b.add_argument("--min-size", type=int, default=30)

    m = sub.add_parser("map", help="render an extrapolation grid")
    common(m)
    m.add_argument("--grid", required=True, help="grid CSV written by 'simulate'")
    m.add_argument("--title", default="")
    m.add_argument("--cell", type=int, default=4)
    return p


def _apply_config(parser, argv):
    """Prepend flags from ``--config`` so explicit flags override them."""
    if "--config" not in argv and not any(a.startswith("--config=") for a in argv):
        return argv
    args, _ = parser.parse_known_args(argv)
    if not getattr(args, "config", None):
        return argv
    kv = pio.read_kv(args.config)
    sub = parser._subparsers._group_actions[0].choices[args.command]
    flags = {}
    for act in sub._actions:
        for opt in act.option_strings:
            flags[opt] = act
    extra = []
    for key, value in kv.items():
        opt = "--" + key.replace("_", "-")
        act = flags.get(opt)
        if act is None or opt == "--config":
            raise ConfigError(f"{args.config}: unknown setting {key!r}")
        if act.nargs == 0:
            if value.lower() in ("1", "true", "yes", "on"):
                extra.append(opt)
            elif value.lower() not in ("0", "false", "no", "off"):
                raise ConfigError(f"{args.config}: {key} expects true/false")
        else:
            extra += [opt, value]
    i = argv.index(args.command)
    return argv[:i + 1] + extra + argv[i + 1:]


def _out_dir(args) -> Path:
    return Path(args.out) if args.out else pio.default_out_dir()


def _load_profile(spec, d):
    if spec == "system":
        return system_profile(d)
    if spec in pio.FIXTURE_PROFILES:
        return pio.fixture_profile(spec)
    return pio.read_profile(spec, names=d.names)


def _load_data(args):
    schema = pio.read_schema(args.schema) if args.schema else pio.default_schema()
    d = pio.read_patients(args.data, schema, min_size=args.min_size)
    return d, schema


# --------------------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    try:
        cfg = SimConfig(setting=args.setting, covariate_count=args.covariates, n=args.n,
                        P=args.practices, replicates=args.replicates, seed=args.seed,
                        targets=tuple(_csv_list(args.targets)),
                        setting3_variant=args.setting3_variant,
                        max_moment_components=args.max_moment_components,
                        setting4_printed=args.setting4_printed)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    methods = _csv_list(args.methods)
    for m in methods:
        if m.partition(":")[0] not in METHODS:
            raise ConfigError(f"unknown method {m!r}")
    progress = (lambda k, n: log.info("replicate %d/%d", k, n)) if args.verbose else None
    study = run_study(cfg, methods, jobs=max(1, args.jobs), cache_dir=args.cache,
                      progress=progress)
    report = build_report(study)
    art = {"report.csv": report.to_csv(),
           "summary.json": json.dumps({"config": vars(args) | {"backend": BACKEND},
                                       "rows": report.rows, "errors": study.errors},
                                      indent=2, sort_keys=True, default=str) + "\n"}
    for (method, basis, target), grid in study_maps(study).items():
        stem = f"map-{method}-{basis}-{target}"
        art[f"{stem}.csv"] = grid.to_csv()
        if args.svg:
            art[f"{stem}.svg"] = grid.to_svg()
    if args.raw:
        rows = []
        for r in range(study.estimates.shape[0]):
            for ci, (method, basis) in enumerate(study.cells):
                for ti, target in enumerate(study.targets):
                    for p in range(cfg.P):
                        rows.append([r + 1, method, basis, target, p + 1,
                                     study.estimates[r, ci, ti, p], study.truth[r, ti, p],
                                     int(study.status[r, ci, ti, p])])
        art["raw.csv"] = pio._csv_text(["replicate", "method", "basis", "target", "practice",
                                        "estimate", "truth", "status"], rows)
    pio.write_outputs(art, _out_dir(args), vars(args))
    for row in report.rows:
        print(f"{row['method']:>10} {row['basis']:>2} {row['target']:>8}  bias={row['bias']:.3f} "
              f"rmse={row['rmse']:.3f} rank_mean={row['rank_mean']:.2f}")
    return 0


def cmd_estimate(args) -> int:
    d, schema = _load_data(args)
    profile = _load_profile(args.profile, d)
    profile.validate(d)
    if args.basis == "X":
        t = raw_transform(d)
    else:
        t = fit_transform(d, TransformMode.PC_SECOND_MOMENT)
    delta = None
    if args.delta:
        B, _ = balance_functions(d, t)
        rows = profile.rows if profile.rows is not None else np.arange(d.n)
        delta = args.delta * B[rows].std(axis=0, ddof=1) if rows.size > 1 else \
            args.delta * B.std(axis=0, ddof=1)
    kw = {}
    if args.method in ("sbw-nonneg", "sbw", "sbw-fe", "sbw-wr"):
        kw["delta"] = delta
    if args.method == "sbw-fe":
        kw["mode"] = args.mode
    if args.method == "mr":
        kw["pinv"] = args.pinv
    table = estimate(args.method, d, profile, t, **kw)
    if args.bootstrap:
        table = estimate_uncertainty(table, d, bootstrap=args.bootstrap, t=t, profile=profile,
                                     seed=args.seed, **kw)
    nulls = detect_null_covariates(d, profile) if profile.basis is Basis.RAW else None
    art = {"estimates.csv": pio.estimates_csv(table)}
    if table.weights is not None:
        art["weights.csv"] = pio.weights_csv(d, table)
    if nulls is not None:
        art["null_census.csv"] = pio._csv_text(["covariate", "practices_null"],
                                               nulls.census.items())
    if t.mode is not TransformMode.RAW:
        art["transform.txt"] = pio.transform_text(t)
    pio.write_outputs(art, _out_dir(args), vars(args))
    c = table.counts()
    print(f"{table.method} ({table.basis}) profile={profile.name}: {table.P} practices, "
          f"{table.n_estimated} estimated, {c['extrapolated']} extrapolated, "
          f"{c['infeasible']} infeasible")
    return 0


def _read_estimates(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or "estimate" not in rows[0]:
        raise ConfigError(f"{path}: not an estimate table")
    out = {}
    for r in rows:
        out[pio._label(r["practice_id"])] = float(r["estimate"]) if r["estimate"] else np.nan
    return out


def cmd_rank(args) -> int:
    out = _out_dir(args)
    if args.fixture or args.matrix:
        if args.matrix:
            with open(args.matrix, newline="", encoding="utf-8") as fh:
                rows = list(csv.reader(fh))
            labels = rows[0][1:]
            counts = np.array([[int(c) for c in r[1:]] for r in rows[1:]])
        else:
            counts, labels = pio.fixture_transition()
        s = churn_summary(counts, pio.edges_from_labels(labels))
        pio.write_outputs({"churn.json": json.dumps(s, indent=2, sort_keys=True) + "\n"}, out,
                          vars(args))
        _print_churn(s)
        return 0
    if not (args.a and args.b):
        raise ConfigError("rank needs --a and --b, or --matrix / --fixture")
    ea, eb = _read_estimates(args.a), _read_estimates(args.b)
    if set(ea) != set(eb):
        from .errors import MismatchedPracticeSets
        raise MismatchedPracticeSets("the two tables cover different practices")
    labels = sorted(ea, key=_sort_key)
    ra = rank_values(np.array([ea[k] for k in labels]))
    rb = rank_values(np.array([eb[k] for k in labels]))
    tm, s = quintile_transition(ra, rb)
    art = {"transition.csv": tm.to_csv(),
           "churn.json": json.dumps(s, indent=2, sort_keys=True) + "\n",
           "scatter.svg": rank_scatter_svg(ra, rb),
           "ranks.csv": pio._csv_text(["practice_id", "rank_a", "rank_b"],
                                      zip(labels, ra.tolist(), rb.tolist()))}
    pio.write_outputs(art, out, vars(args))
    _print_churn(s)
    return 0


def _print_churn(s):
    print(f"{s['same_pct']}% same quintile ({s['same']}), {s['one_pct']}% one quintile "
          f"({s['one']}), {s['two_plus_pct']}% two or more ({s['two_plus']}), "
          f"{s['corners']} corner to corner")


def cmd_balance(args) -> int:
    d, _ = _load_data(args)
    profile = _load_profile(args.profile, d)
    ids = {pid: i for i, pid in enumerate(d.patient_ids or ())}
    w = np.full(d.n, np.nan)
    with open(args.weights, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            i = ids.get(r["patient_id"])
            if i is not None and r["weight"]:
                w[i] = float(r["weight"])
    rows_out = []
    for p, rows in enumerate(d.practice_index, start=1):
        wp = w[rows]
        if np.any(np.isnan(wp)):
            continue
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            tab = balance_table(d, profile, wp, rows)
        for br in tab:
            rows_out.append([d.practice_labels[p - 1], br.covariate, br.target, br.before,
                             br.after, int(br.standardized)])
    pio.write_outputs({"balance.csv": pio._csv_text(
        ["practice_id", "covariate", "target", "before", "after", "standardized"], rows_out)},
        _out_dir(args), vars(args))
    after = np.array([r[4] for r in rows_out]) if rows_out else np.zeros(0)
    print(f"balance for {len({r[0] for r in rows_out})} weighted practices; "
          f"max |after| = {np.abs(after).max(initial=0.0):.3g}")
    return 0


def cmd_map(args) -> int:
    with open(args.grid, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    grid = np.array([[int(c) for c in r[1:]] for r in rows[1:]], dtype=np.int8)
    m = ExtrapolationMap(grid, args.title)
    name = Path(args.grid).stem + ".svg"
    pio.write_outputs({name: m.to_svg(args.cell)}, _out_dir(args), vars(args))
    print(json.dumps(m.counts(), sort_keys=True))
    return 0


COMMANDS = {"simulate": cmd_simulate, "estimate": cmd_estimate, "rank": cmd_rank,
            "balance": cmd_balance, "map": cmd_map}


def _report_warnings(caught):
    """One stderr line per distinct warning, with its count."""
    seen = {}
    for w in caught:
        key = (w.category.__name__, str(w.message))
        seen[key] = seen.get(key, 0) + 1
    for (cat, msg), k in seen.items():
        print(f"warning: {cat}: {msg}" + (f" (x{k})" if k > 1 else ""), file=sys.stderr)


def _fail(exc, code):
    rec = {"error": type(exc).__name__, "message": str(exc), "exit": code}
    print(json.dumps(rec), file=sys.stderr)
    return code


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        argv = _apply_config(parser, argv)
        args = parser.parse_args(argv)
        if not args.command:
            raise ConfigError("a subcommand is required: " + ", ".join(COMMANDS))
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            code = COMMANDS[args.command](args)
        _report_warnings(caught)
        return code
    except ConfigError as exc:
        return _fail(exc, 2)
    except (ProfileQMError, OSError, ValueError) as exc:
        return _fail(exc, 1)


if __name__ == "__main__":
    sys.exit(main())
