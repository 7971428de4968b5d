"""Compare the compiled and pure-Python active-set kernels.

Each case is a practice-sized nonnegative balancing problem whose target sits
near the edge of the practice's covariate hull, so that many weights hit zero
and the active set changes often. Reported times are the best of ``--repeat``
runs, both for the full solve (feasibility check, kernel and polish) and for
the nonnegative kernel call alone.

    python3 benchmarks/bench_kernels.py
    python3 benchmarks/bench_kernels.py --quick
"""

from __future__ import annotations

import argparse
import json
import time

import numpy as np

from profileqm.solver import SbwProblem, _backend, solve_sbw
from profileqm.solver.sbw import _system

CASES = [(50, 5), (100, 10), (250, 10), (250, 37), (1000, 37)]
QUICK = [(30, 3), (60, 6)]


def make_problem(n, L, rng):
    B = rng.normal(size=(n, L))
    # pull the target most of the way from the centre towards an extreme patient
    far = B[np.argmax(np.linalg.norm(B - B.mean(axis=0), axis=1))]
    target = B.mean(axis=0) + 0.6 * (far - B.mean(axis=0)) / max(L, 1) ** 0.5
    return SbwProblem(B, target, nonneg=True)


def best_time(fn, repeat):
    out = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        out = min(out, time.perf_counter() - t0)
    return out


def run(cases, repeat, seed=0):
    kernels = ["python"] + (["compiled"] if _backend.compiled is not None else [])
    rng = np.random.default_rng(seed)
    rows = []
    for n, L in cases:
        prob = make_problem(n, L, rng)
        ref = solve_sbw(prob, kernel="python")
        row = {"n": n, "L": L, "status": ref.status.value}
        sys_ = _system(prob)
        u = np.full(n, 1.0 / n)
        for k in kernels:
            kern = _backend.get_kernel(k)
            row[f"{k}_kernel_ms"] = 1e3 * best_time(
                lambda: kern(sys_.C, sys_.d, sys_.n_eq, u, True), repeat)
            sol = solve_sbw(prob, kernel=k)
            if ref.weights is not None:
                row[f"{k}_max_diff"] = float(np.abs(sol.weights - ref.weights).max())
            row[f"{k}_ms"] = 1e3 * best_time(lambda: solve_sbw(prob, kernel=k), repeat)
        if "compiled_ms" in row:
            row["speedup"] = row["python_ms"] / row["compiled_ms"]
            row["kernel_speedup"] = row["python_kernel_ms"] / row["compiled_kernel_ms"]
        rows.append(row)
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--quick", action="store_true", help="two small cases, one repeat")
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", action="store_true", help="print JSON instead of a table")
    args = ap.parse_args(argv)
    rows = run(QUICK if args.quick else CASES, 1 if args.quick else args.repeat)
    if args.json:
        print(json.dumps(rows, indent=2))
        return rows
    if _backend.compiled is None:
        print("compiled kernel not built; timing the pure-Python kernel only")
    print(f"{'':24}{'full solve (ms)':^30}{'kernel only (ms)':^30}")
    print(f"{'n':>6} {'L':>4} {'status':>13} " + f"{'python':>10}{'compiled':>10}{'x':>8}  " * 2)
    for r in rows:
        cells = []
        for pre in ("", "kernel_"):
            py = r[f"python_{pre}ms"]
            comp = r.get(f"compiled_{pre}ms")
            cells.append(f"{py:10.2f}" + (f"{comp:10.2f}{py / comp:8.1f}" if comp else f"{'-':>10}{'-':>8}"))
        print(f"{r['n']:6d} {r['L']:4d} {r['status']:>13} " + "  ".join(cells))
    return rows


if __name__ == "__main__":
    main()
