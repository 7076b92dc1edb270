"""Compare the compiled kernel lane against the NumPy fallback.

Times the three hot kernels (sparse matvec, ILU(0) factorization, ILU(0)
triangular solve) on pressure and momentum systems from representative
meshes, importing both lane modules side by side. A final section times
whole solver steps end to end in subprocesses, since lane selection
happens at import.

Run from the repository root::

    python3 benchmarks/bench_kernels.py [--reps 200] [--csv out.csv]
"""

import argparse
import csv
import os
import statistics
import subprocess
import sys
import time

import numpy as np

from pisoflow import mesh
from pisoflow import _kernels_py
from pisoflow.piso import assemble_momentum, assemble_pressure

try:
    from pisoflow import _kernels_c
except ImportError:
    _kernels_c = None


def _systems():
    out = []
    rng = np.random.default_rng(0)
    for label, dom in (("cavity-64x64", mesh.make_cavity((64, 64))),
                       ("channel-16x16x8", mesh.make_channel((16, 16, 8)))):
        u_n = 0.1 * rng.standard_normal((dom.n, dom.dim))
        mom = assemble_momentum(dom, u_n, nu=0.01, dt=0.1)
        prs = assemble_pressure(dom, 1.0 / mom[dom.pattern.diag_pos])
        out.append((f"{label} momentum", dom.pattern, mom))
        out.append((f"{label} pressure", dom.pattern, prs))
    return out


def _median_time(fn, reps):
    ts = []
    for _ in range(reps):
        t0 = time.perf_counter()
        fn()
        ts.append(time.perf_counter() - t0)
    return statistics.median(ts)


def bench_kernels(reps):
    lanes = [("pure", _kernels_py)]
    if _kernels_c is not None:
        lanes.append(("compiled", _kernels_c))
    rows = []
    rng = np.random.default_rng(1)
    for label, pattern, data in _systems():
        x = rng.standard_normal(pattern.n)
        data = np.ascontiguousarray(data)
        for lane_name, lane in lanes:
            pat = lane.make_pattern(pattern.indptr, pattern.indices,
                                    pattern.diag_pos)
            t_mv = _median_time(lambda: lane.matvec(pat, data, x), reps)
            t_fac = _median_time(
                lambda: lane.ilu0_factor(pat, data, 1e-12),
                max(reps // 10, 3))
            lu, _ = lane.ilu0_factor(pat, data, 1e-12)
            t_sol = _median_time(lambda: lane.ilu0_solve(pat, lu, x), reps)
            rows.append({"system": label, "lane": lane_name, "n": pattern.n,
                         "nnz": pattern.nnz, "matvec_s": t_mv,
                         "ilu0_factor_s": t_fac, "ilu0_solve_s": t_sol})
    return rows


_STEP_SNIPPET = """
import time
import numpy as np
from pisoflow import kernels, mesh
from pisoflow.cases import gauss_profile
from pisoflow.piso import PisoWorkspace, StepConfig, make_state, piso_step

dom = mesh.make_box((48, 48))
cfg = StepConfig(dt=0.2, nu=0.005, tol=1e-9)
state = make_state(dom, u0=gauss_profile(dom, amplitude=1.5))
ws = PisoWorkspace(dom)
state, _ = piso_step(dom, state, cfg, workspace=ws)   # warm caches
t0 = time.perf_counter()
for _ in range(10):
    state, _ = piso_step(dom, state, cfg, workspace=ws)
print(kernels.LANE, (time.perf_counter() - t0) / 10)
"""


def bench_steps():
    rows = []
    for lane_name, env_val, tag in (("pure", "1", _kernels_py.LANE),
                                    ("compiled", "0",
                                     getattr(_kernels_c, "LANE", None))):
        if tag is None:
            continue
        env = dict(os.environ, PISOFLOW_PURE=env_val)
        proc = subprocess.run([sys.executable, "-c", _STEP_SNIPPET],
                              capture_output=True, text=True, env=env,
                              check=True)
        reported_lane, seconds = proc.stdout.split()
        assert reported_lane == tag, proc.stdout
        rows.append({"system": "box-48x48 full step", "lane": lane_name,
                     "n": 0, "nnz": 0, "step_s": float(seconds)})
    return rows


def _print_table(rows):
    by_system = {}
    for r in rows:
        by_system.setdefault(r["system"], {})[r["lane"]] = r
    for system, lanes in by_system.items():
        print(f"\n{system}")
        cols = [k for k in ("matvec_s", "ilu0_factor_s", "ilu0_solve_s",
                            "step_s") if k in next(iter(lanes.values()))]
        for col in cols:
            line = f"  {col.removesuffix('_s'):13s}"
            for lane_name in ("pure", "compiled"):
                if lane_name in lanes:
                    line += f" {lane_name}={lanes[lane_name][col] * 1e6:10.1f}us"
            if "pure" in lanes and "compiled" in lanes:
                speedup = lanes["pure"][col] / lanes["compiled"][col]
                line += f"  speedup={speedup:5.2f}x"
            print(line)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--reps", type=int, default=200,
                    help="repetitions per kernel timing (median reported)")
    ap.add_argument("--csv", help="also write raw rows to this CSV file")
    ap.add_argument("--no-steps", action="store_true",
                    help="skip the end-to-end subprocess timings")
    args = ap.parse_args(argv)

    if _kernels_c is None:
        print("compiled lane not importable; timing the pure lane only")
    rows = bench_kernels(args.reps)
    if not args.no_steps:
        rows += bench_steps()
    _print_table(rows)

    if args.csv:
        keys = ["system", "lane", "n", "nnz", "matvec_s", "ilu0_factor_s",
                "ilu0_solve_s", "step_s"]
        with open(args.csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys)
            w.writeheader()
            for r in rows:
                w.writerow({k: r.get(k, "") for k in keys})
        print(f"\nwrote {args.csv}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
