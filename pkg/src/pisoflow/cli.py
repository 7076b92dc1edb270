"""Command-line entry points.

Subcommands: simulate, optimize, ablate, gradcheck, stats. Exit codes:

    0  success
    1  a check failed or an optimization diverged
    2  usage or configuration error
    3  numerical failure inside the solver

Set ``PISOFLOW_THREADS`` to bound the BLAS/LAPACK thread pools used by the
sparse solves (exported to the usual OMP/BLAS variables before heavy work);
set ``PISOFLOW_PURE=1`` to force the pure-Python kernel lane.
"""

import argparse
import csv
import glob
import os
import statistics
import sys

import numpy as np

__all__ = ["cli_dispatch", "main"]


def _apply_thread_env():
    n = os.environ.get("PISOFLOW_THREADS")
    if not n:
        return
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ.setdefault(var, n)


def _build_parser():
    p = argparse.ArgumentParser(
        prog="pisoflow",
        description="Differentiable incompressible-flow solver driver.")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a configured case")
    sim.add_argument("--config", required=True, help="case config file")
    sim.add_argument("--out", required=True, help="output directory")
    sim.add_argument("--dump-every", type=int, default=0, metavar="N",
                     help="also dump fields every N steps (default: "
                          "final state only)")

    opt = sub.add_parser("optimize", help="gradient-descent optimization")
    opt.add_argument("--config", required=True,
                     help="config with an [optimization] section")
    opt.add_argument("--trace", help="write the per-iteration trace CSV")

    abl = sub.add_parser("ablate",
                         help="gradient-path ablation on the scaling task")
    abl.add_argument("--task", default="scaling", choices=["scaling"])
    abl.add_argument("--paths", default="full,adv,p,none",
                     help="comma list from: full, adv, p, none")
    abl.add_argument("--n", default="1,10,100", dest="lengths",
                     help="comma list of rollout lengths")
    abl.add_argument("--iterations", type=int, default=60)
    abl.add_argument("--lr", type=float, default=0.01,
                     help="learning rate for short rollouts")
    abl.add_argument("--lr-long", type=float, default=0.001,
                     help="learning rate used once n reaches 100")
    abl.add_argument("--out", help="write the comparison CSV here")

    gc = sub.add_parser("gradcheck",
                        help="finite-difference checks of all gradients")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--threshold", type=float, default=1e-4)
    gc.add_argument("--precision", default="double",
                    choices=["double", "single"])

    st = sub.add_parser("stats",
                        help="reduce field dumps to profile CSVs")
    st.add_argument("--config", required=True,
                    help="config describing the channel mesh")
    st.add_argument("--dumps", required=True,
                    help="glob of velocity dumps (time-ordered by name)")
    st.add_argument("--out", required=True, help="profile CSV path")
    return p


def _load_config(path):
    from .config import parse_config_file
    return parse_config_file(path)


def _cmd_simulate(args):
    from .fielddump import dump_state
    cfg = _load_config(args.config)
    domain = cfg.build_mesh()
    os.makedirs(args.out, exist_ok=True)
    clock = {"t": 0.0}

    def on_step(k, state, diag):
        clock["t"] += diag.dt
        if args.dump_every and k % args.dump_every == 0:
            dump_state(os.path.join(args.out, f"u_{k:06d}.dump"), domain,
                       state.u, time=clock["t"], precision=cfg.precision)

    from .cases import run_case
    res = run_case(cfg, on_step=on_step)
    dump_state(os.path.join(args.out, "u_final.dump"), domain, res.state.u,
               time=res.time, precision=cfg.precision)
    dump_state(os.path.join(args.out, "p_final.dump"), domain, res.state.p,
               time=res.time, precision=cfg.precision)
    umax = float(np.abs(res.state.u).max())
    print(f"case {cfg.name}: steps={res.steps_run} time={res.time:.6g} "
          f"steady={res.steady} max|u|={umax:.6g} out={args.out}")
    return 0


def _cmd_optimize(args):
    from .cases import optimize
    cfg = _load_config(args.config)
    if cfg.optimization is None:
        print("error: config has no [optimization] section",
              file=sys.stderr)
        return 2
    tr = optimize(cfg)
    if args.trace:
        tr.to_csv(args.trace)
    param = tr.final_param
    if isinstance(param, np.ndarray):
        param = " ".join(f"{v:.8g}" for v in param)
    else:
        param = f"{param:.8g}"
    print(f"optimize {cfg.optimization.target}: iterations="
          f"{len(tr.losses)} final_loss={tr.final_loss:.6e} "
          f"final_param={param} diverged={tr.diverged}")
    return 1 if tr.diverged else 0


_PATH_ALIASES = {"full": "full", "adv": "adv_only", "adv_only": "adv_only",
                 "p": "p_only", "p_only": "p_only", "none": "none"}


def _cmd_ablate(args):
    from .adjoint import GradientPath
    from .cases import path_ablation, scaling_task_config

    try:
        paths = [GradientPath.parse(_PATH_ALIASES[s.strip().lower()])
                 for s in args.paths.split(",") if s.strip()]
        lengths = [int(s) for s in args.lengths.split(",") if s.strip()]
    except (KeyError, ValueError) as exc:
        print(f"error: bad --paths/--n value ({exc})", file=sys.stderr)
        return 2
    if not paths or not lengths:
        print("error: need at least one path and one length",
              file=sys.stderr)
        return 2
    cfg = scaling_task_config(steps=1, lr=args.lr,
                              iterations=args.iterations)
    lrs = {(p, n): (args.lr_long if n >= 100 else args.lr)
           for p in paths for n in lengths}
    out = path_ablation(cfg, paths=paths, lengths=lengths, lrs=lrs)
    rows = []
    for (path, n), tr in sorted(out.items(),
                                key=lambda kv: (kv[0][1], kv[0][0].value)):
        med = statistics.median(tr.times) if tr.times else float("nan")
        rows.append([path.value, n, lrs[(path, n)], len(tr.losses),
                     min(tr.losses), tr.final_loss, med,
                     int(tr.diverged)])
        print(f"path={path.value:8s} n={n:4d} lr={lrs[(path, n)]:g} "
              f"best_loss={min(tr.losses):.3e} "
              f"final_loss={tr.final_loss:.3e} "
              f"median_iter_s={med:.4f} diverged={tr.diverged}")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path", "n", "lr", "iterations", "best_loss",
                        "final_loss", "median_iter_seconds", "diverged"])
            w.writerows(rows)
    return 0


def _cmd_gradcheck(args):
    if args.precision != "double":
        print("error: gradients are computed in double precision only; "
              "single precision applies to field dumps", file=sys.stderr)
        return 2
    from .cases import standard_gradcheck
    ok = True
    for label, rep in standard_gradcheck(seed=args.seed,
                                         threshold=args.threshold):
        print(rep.text())
        ok = ok and rep.passed
    print(f"gradcheck: {'all stages passed' if ok else 'FAILURES above'}")
    return 0 if ok else 1


def _cmd_stats(args):
    from .fielddump import load_state
    from .stats import ChannelAccumulator, profile_to_csv

    cfg = _load_config(args.config)
    domain = cfg.build_mesh()
    try:
        acc = ChannelAccumulator(domain, wall_axis=cfg.wall_axis)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    files = sorted(glob.glob(args.dumps))
    if not files:
        print(f"error: no dumps match {args.dumps!r}", file=sys.stderr)
        return 2
    for path in files:
        u, _, _ = load_state(path, domain)
        acc.add_frame(np.asarray(u, dtype=np.float64))
    profile_to_csv(args.out, acc.profile(nu=cfg.nu))
    print(f"stats: {len(files)} frames -> {args.out} "
          f"({acc.slices.ny} wall-normal slices)")
    return 0


def cli_dispatch(argv):
    """Run one CLI invocation; returns the process exit status."""
    _apply_thread_env()
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    handlers = {"simulate": _cmd_simulate, "optimize": _cmd_optimize,
                "ablate": _cmd_ablate, "gradcheck": _cmd_gradcheck,
                "stats": _cmd_stats}
    from .config import ConfigError
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


def main():
    raise SystemExit(cli_dispatch(sys.argv[1:]))
