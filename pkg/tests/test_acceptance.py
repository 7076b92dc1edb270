"""Shipping acceptance battery.

One test per numbered criterion, covering analytic flow exactness, skewed
meshes, gradient correctness, adjoint identities, the gradient-path
benchmark, direct parameter optimizations, the incompressibility contract,
path decomposition, streaming statistics, channel behavior, and the
divergence-free gradient projection. Each test prints a CRITERION line
with the measured numbers (visible with ``pytest -s``); the assertions
enforce the stated tolerances.
"""

import statistics
import time
from dataclasses import replace

import numpy as np

from pisoflow import mesh
from pisoflow.adjoint import (GradState, GradientPath, backward_rollout,
                              backward_step, backward_correct_velocity,
                              backward_pressure_matrix,
                              backward_pressure_solve, div_free_grad_mod,
                              gradcheck)
from pisoflow.cases import (CaseConfig, gauss_profile, lid_task_config,
                            optimize, run_case, scaling_task_config,
                            standard_gradcheck, viscosity_task_config)
from pisoflow.linalg import bicgstab_solve, cg_solve
from pisoflow.piso import (StepConfig, StepTape, assemble_momentum,
                           assemble_pressure, correct_velocity,
                           divergence_rhs, make_state, piso_step,
                           reichardt_init, wall_forcing_source, wide_grad,
                           PisoWorkspace)
from pisoflow.stats import ChannelAccumulator, MomentAccumulator


def _verdict(num, name, ok, detail):
    print(f"CRITERION {num:2d} [{name}] {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, f"criterion {num} ({name}): {detail}"


# ---------------------------------------------------------------------------
# 1 & 2: steady duct flow against the closed-form profile


def _steady_duct_error(n, distort=0.0, nonortho=0):
    cfg = CaseConfig(name=f"duct{n}", mesh="poiseuille",
                     mesh_args={"shape": (n, n), "distort": distort},
                     nu=1.0, source=(1.0, 0.0), dt=0.5, steps=4000,
                     steady_tol=1e-8, tol=1e-12,
                     nonortho_correctors=nonortho)
    res = run_case(cfg)
    assert res.steady, f"{n}^2 duct did not reach steady state"
    umax = float(res.state.u[:, 0].max())
    return abs(umax - 0.125) / 0.125


def test_criterion_01_poiseuille_exactness():
    errs = {n: _steady_duct_error(n) for n in (8, 16, 32, 64)}
    detail = " ".join(f"{n}^2:{errs[n]:.3e}" for n in errs)
    ok = (errs[32] < 0.02 and errs[64] < 0.005
          and errs[8] > errs[16] > errs[32] > errs[64])
    _verdict(1, "poiseuille-exactness", ok,
             f"max-u rel err {detail} (need <2e-2 at 32^2, <5e-3 at 64^2, "
             "monotone)")


def test_criterion_02_distorted_grid_robustness():
    err = _steady_duct_error(64, distort=0.35, nonortho=2)
    _verdict(2, "distorted-grid", err <= 0.05,
             f"max-u rel err {err:.3e} on the rotationally distorted "
             "64^2 duct (need <=5e-2)")


# ---------------------------------------------------------------------------
# 3: finite-difference agreement for every backward kernel and for
#    composite single-step and multi-step rollouts


def _kernel_isolation_reports():
    reports = []
    rng = np.random.default_rng(23)

    dom = mesh.make_poiseuille((5, 4), distort=0.3)
    w = rng.standard_normal((dom.n, 2))
    base = {"h": rng.standard_normal((dom.n, 2)),
            "p": rng.standard_normal(dom.n),
            "a": 1.0 + rng.random(dom.n)}

    def fn_correct(inp):
        u = correct_velocity(dom, np.asarray(inp["h"]),
                             np.asarray(inp["p"]),
                             1.0 / np.asarray(inp["a"]))
        dA, dp, dh = backward_correct_velocity(
            dom, np.asarray(inp["p"]), np.asarray(inp["a"]), w)
        return float(np.vdot(w, u)), {"h": dh, "p": dp, "a": dA}

    reports.append(("kernel-correct-velocity",
                    gradcheck(fn_correct, base, stage="correct_velocity")))

    wp = rng.standard_normal(dom.n)
    solve_base = {"a": 1.0 + rng.random(dom.n),
                  "b": rng.standard_normal(dom.n)}

    def fn_solve(inp):
        a_diag = np.asarray(inp["a"])
        p_data = assemble_pressure(dom, 1.0 / a_diag)
        p, _ = cg_solve(dom.pattern, -p_data, -np.asarray(inp["b"]),
                        tol=1e-13, zero_mean=True, stage="accept")
        dP, db = backward_pressure_solve(dom, p_data, p, wp, tol=1e-12)
        dA = backward_pressure_matrix(dom, 1.0 / a_diag, dP)
        return float(np.vdot(wp, p)), {"a": dA, "b": db}

    reports.append(("kernel-pressure-solve",
                    gradcheck(fn_solve, solve_base, stage="pressure_solve")))
    return reports


def test_criterion_03_gradcheck_suite():
    t0 = time.perf_counter()
    reports = _kernel_isolation_reports() + standard_gradcheck(seed=17)
    elapsed = time.perf_counter() - t0
    worst = max(rep.max_rel_err for _, rep in reports)
    all_pass = all(rep.passed for _, rep in reports)
    for label, rep in reports:
        for line in rep.text().splitlines():
            print(f"  {label}: {line}")
    _verdict(3, "gradcheck-suite", all_pass and elapsed < 120.0,
             f"{len(reports)} stages, worst rel err {worst:.3e} "
             f"(need <=1e-4), {elapsed:.1f}s (need <120s)")


# ---------------------------------------------------------------------------
# 4: transpose identities for both linear-solve adjoints


def test_criterion_04_adjoint_solve_identities():
    dom = mesh.make_poiseuille((6, 5), distort=0.3)
    rng = np.random.default_rng(31)
    pat = dom.pattern

    u_n = 0.4 * rng.standard_normal((dom.n, 2))
    c_data = assemble_momentum(dom, u_n, nu=0.2, dt=0.1)
    v = rng.standard_normal(dom.n)
    wx = rng.standard_normal(dom.n)
    x, _ = bicgstab_solve(pat, c_data, v, tol=1e-13)
    y, _ = bicgstab_solve(pat, pat.transpose_data(c_data), wx, tol=1e-13)
    lhs, rhs = np.vdot(wx, x), np.vdot(y, v)
    mom_err = abs(lhs - rhs) / max(abs(lhs), 1e-300)

    a_inv = 1.0 / (1.0 + rng.random(dom.n))
    p_data = assemble_pressure(dom, a_inv)
    v0 = v - v.mean()
    w0 = wx - wx.mean()
    xp, _ = cg_solve(pat, -p_data, -v0, tol=1e-13, zero_mean=True)
    yp, _ = cg_solve(pat, -pat.transpose_data(p_data), -w0, tol=1e-13,
                     zero_mean=True)
    lp, rp = np.vdot(w0, xp), np.vdot(yp, v0)
    prs_err = abs(lp - rp) / max(abs(lp), 1e-300)

    _verdict(4, "adjoint-identities",
             mom_err <= 1e-9 and prs_err <= 1e-9,
             f"momentum solve {mom_err:.3e}, pressure solve {prs_err:.3e} "
             "(need <=1e-9)")


# ---------------------------------------------------------------------------
# 5: gradient-path benchmark on the periodic Gaussian box


def _scaling_trace(n, lr, path):
    base = scaling_task_config()
    cfg = replace(base, steps=n,
                  optimization=replace(base.optimization, lr=lr, path=path))
    return optimize(cfg)


def test_criterion_05_scaling_task():
    full = {n: _scaling_trace(n, 0.01, GradientPath.FULL) for n in (1, 10)}
    full[100] = _scaling_trace(100, 0.001, GradientPath.FULL)
    full_best = {n: min(tr.losses) for n, tr in full.items()}
    ok_full = all(v < 1e-5 for v in full_best.values())

    short = {}
    for path in (GradientPath.ADV_ONLY, GradientPath.P_ONLY,
                 GradientPath.NONE):
        for n in (1, 10):
            short[(path, n)] = min(_scaling_trace(n, 0.01, path).losses)
    ok_short = all(v < 1e-4 for v in short.values())

    none_hot = _scaling_trace(100, 0.01, GradientPath.NONE)
    ok_hot = none_hot.diverged or min(none_hot.losses) >= 1e-4
    none_cold = _scaling_trace(100, 0.001, GradientPath.NONE)
    ok_cold = (not none_cold.diverged
               and none_cold.final_loss > full[100].final_loss)

    meds = _backward_time_medians()
    ok_time = (meds["none"] < meds["adv_only"] < meds["full"])

    print(f"  full best loss: " + " ".join(
        f"n={n}:{full_best[n]:.2e}" for n in (1, 10, 100)))
    print("  all-path best loss (n=1,10): " + " ".join(
        f"{p.value}/n={n}:{v:.2e}" for (p, n), v in short.items()))
    print(f"  none n=100 lr=0.01: diverged={none_hot.diverged} "
          f"best={min(none_hot.losses):.2e}; lr=0.001 "
          f"final={none_cold.final_loss:.2e} vs full {full[100].final_loss:.2e}")
    print("  median backward s/rollout: " + " ".join(
        f"{k}={v * 1e3:.2f}ms" for k, v in meds.items()))
    _verdict(5, "scaling-task", ok_full and ok_short and ok_hot and ok_cold
             and ok_time,
             f"full<1e-5 {ok_full}, paths<1e-4 {ok_short}, "
             f"none@0.01 fails {ok_hot}, none@0.001 higher {ok_cold}, "
             f"backward time none<adv<full {ok_time}")


def _backward_time_medians():
    dom = mesh.make_box((32, 32))
    cfg = StepConfig(dt=0.5, nu=0.002, tol=1e-10)
    state = make_state(dom, u0=gauss_profile(dom, amplitude=2.5))
    tapes = []
    for _ in range(5):
        t = StepTape()
        state, _ = piso_step(dom, state, cfg, tape=t)
        tapes.append(t)
    rng = np.random.default_rng(0)
    cots = [None] * 4 + [GradState(u=rng.standard_normal((dom.n, 2)),
                                   p=np.zeros(dom.n))]
    meds = {}
    for path in (GradientPath.NONE, GradientPath.ADV_ONLY,
                 GradientPath.FULL):
        ts = []
        for _ in range(9):
            t0 = time.perf_counter()
            backward_rollout(dom, tapes, cots, path=path, tol=1e-10)
            ts.append(time.perf_counter() - t0)
        meds[path.value] = statistics.median(ts)
    return meds


# ---------------------------------------------------------------------------
# 6: direct single-parameter optimizations


def test_criterion_06_direct_optimizations():
    lid = optimize(lid_task_config())
    lid_res = abs(float(lid.params[-1]) - 0.2)
    visc = optimize(viscosity_task_config())
    visc_res = abs(float(visc.params[-1]) - 0.001)
    _verdict(6, "direct-optimizations",
             not lid.diverged and not visc.diverged
             and lid_res < 1e-5 and visc_res < 1e-5,
             f"lid residual {lid_res:.3e}, viscosity residual "
             f"{visc_res:.3e} after 100 iterations (need <1e-5)")


# ---------------------------------------------------------------------------
# 7: incompressibility after every accepted step


def test_criterion_07_divergence_contract():
    cases = [
        CaseConfig(name="cav", mesh="cavity", mesh_args={"shape": (16, 16)},
                   nu=0.01, dt=0.1, steps=12, tol=1e-10),
        CaseConfig(name="duct", mesh="poiseuille",
                   mesh_args={"shape": (12, 10), "distort": 0.3},
                   nu=0.05, source=(1.0, 0.0), dt=0.2, steps=10,
                   nonortho_correctors=2, tol=1e-9),
        CaseConfig(name="twob", mesh="two_block",
                   mesh_args={"shape": (6, 6), "rotated": True},
                   nu=0.05, dt=0.1, steps=8, tol=1e-10,
                   u0="gauss", u0_args={"amplitude": 0.5}),
        CaseConfig(name="chan", mesh="channel",
                   mesh_args={"shape": (8, 8, 6)}, forcing="wall_shear",
                   u0="reichardt", u0_args={"re_tau": 180}, cfl=0.8,
                   dt_max=0.5, steps=8, tol=1e-8),
        CaseConfig(name="gbox", mesh="box", mesh_args={"shape": (18, 16)},
                   nu=0.002, dt=0.5, steps=10, u0="gauss",
                   u0_args={"amplitude": 2.5}, tol=1e-10),
    ]
    worst_ratio = 0.0
    worst_case = ""
    for cfg in cases:
        ratios = []
        run_case(cfg, on_step=lambda k, s, d:
                 ratios.append(d.div_contract / cfg.tol))
        assert len(ratios) == cfg.steps
        if max(ratios) > worst_ratio:
            worst_ratio, worst_case = max(ratios), cfg.name
    _verdict(7, "divergence-contract", worst_ratio <= 10.0,
             f"worst post-step divergence {worst_ratio:.2f}x pressure "
             f"tolerance (case {worst_case}, need <=10x), "
             f"{len(cases)} case families")


# ---------------------------------------------------------------------------
# 8: gradient-path decomposition of the backward pass


def test_criterion_08_path_decomposition():
    # Chain-rule paths that traverse both solve families make a strict
    # three-way split impossible, so the increments are nested: what the
    # advection adjoints add on top of the bypass terms, then what the
    # pressure adjoints add on top of that. Each piece comes from its own
    # backward execution; the checks below pin the gating structure and
    # the reconstruction.
    worst = 0.0
    for dom, nonortho in ((mesh.make_cavity((6, 6)), 0),
                          (mesh.make_poiseuille((6, 5), distort=0.3), 1)):
        rng = np.random.default_rng(41)
        cfg = StepConfig(dt=0.08, nu=0.15, tol=1e-13, source=(0.2, -0.1),
                         nonortho_correctors=nonortho)
        state = make_state(dom, u0=0.3 * rng.standard_normal((dom.n, 2)))
        tape = StepTape()
        piso_step(dom, state, cfg, tape=tape)
        cot = GradState(u=rng.standard_normal((dom.n, 2)),
                        p=np.zeros(dom.n))

        def run(path):
            return backward_step(dom, tape, cot, path=path, tol=1e-13)

        g_full, g_adv, g_none = (run(GradientPath.FULL),
                                 run(GradientPath.ADV_ONLY),
                                 run(GradientPath.NONE))
        assert g_none.solve_iterations == 0
        assert 0 < g_adv.solve_iterations < g_full.solve_iterations
        adv_inc = g_adv.u - run(GradientPath.NONE).u
        p_inc = g_full.u - run(GradientPath.ADV_ONLY).u
        assert np.abs(adv_inc).max() > 0 and np.abs(p_inc).max() > 0
        recon = run(GradientPath.NONE).u + adv_inc + p_inc
        rel = (np.abs(recon - g_full.u).max()
               / max(np.abs(g_full.u).max(), 1e-300))
        worst = max(worst, rel)
    _verdict(8, "path-decomposition", worst <= 1e-10,
             f"full vs none+increments rel err {worst:.3e} (need <=1e-10), "
             "increments nonzero, solve gating verified")


# ---------------------------------------------------------------------------
# 9: streaming moment statistics against two-pass oracles


def _two_pass(arr, t):
    mu = arr.mean(axis=0)
    prod = np.ones(arr.shape[0])
    for ch in t:
        prod = prod * (arr[:, ch] - mu[ch])
    return float(prod.mean())


def test_criterion_09_statistics_oracle():
    rng = np.random.default_rng(9)
    arr = rng.standard_normal((10_000, 3)) * [1.0, 4.0, 0.3] + [2.0, -1.0, 0.0]
    acc = MomentAccumulator(("u", "v", "w"), max_order=4)
    for chunk in np.array_split(arr, 173):
        acc.update(chunk)
    worst = 0.0
    for t in acc.tuples:
        ref = _two_pass(arr, t)
        # tolerance 1e-12 relative with a matching absolute floor: odd
        # co-moments of symmetric data are zero up to sampling noise
        err = abs(acc.moment(t) - ref) / max(1e-12 * abs(ref), 1e-12)
        worst = max(worst, err)

    parts = [rng.standard_normal((n, 3)) + 0.5 for n in (900, 41, 2300)]
    accs = []
    for p in parts:
        a = MomentAccumulator(("u", "v", "w"), max_order=4)
        a.update(p)
        accs.append(a)
    left = accs[0].merge(accs[1]).merge(accs[2])
    right = accs[0].merge(accs[1].merge(accs[2]))
    merge_err = max(abs(left.moment(t) - right.moment(t))
                    / max(1e-12 * abs(left.moment(t)), 1e-12)
                    for t in left.tuples)
    _verdict(9, "statistics-oracle", worst <= 1.0 and merge_err <= 1.0,
             f"stream-vs-two-pass deviation {worst:.3f}x the 1e-12 "
             f"tolerance, merge associativity {merge_err:.3f}x, on "
             "1e4-sample streams (need <=1x)")


# ---------------------------------------------------------------------------
# 10: forced channel behavior at desk scale


def _mirror_perm(dom):
    grid = dom.block_index_grid(0)
    perm = np.empty(dom.n, dtype=np.int64)
    perm[grid.ravel()] = grid[:, ::-1, :].ravel()
    return perm


def test_criterion_10_channel_property():
    t0 = time.perf_counter()
    dom = mesh.make_channel((16, 16, 8))
    state, nu, u_tau = reichardt_init(dom, re_tau=550, perturbation=0.1,
                                      seed=4)
    re_cl = 1.0 / nu
    ok_recl = abs(re_cl - 15037) < 5

    dt = 0.8 * (2.0 * np.pi / 16) / float(np.abs(state.u[:, 0]).max())

    def run(u0):
        st = make_state(dom, u0=u0)
        acc = ChannelAccumulator(dom, wall_axis=1)
        ws = PisoWorkspace(dom)
        q0 = float(np.sum(st.u[:, 0] * dom.jac))
        lo = hi = q0
        for k in range(100):
            src = wall_forcing_source(dom, st.u, nu, wall_axis=1,
                                      flow_axis=0, delta=1.0)
            st, _ = piso_step(dom, st,
                              StepConfig(dt=dt, nu=nu, tol=1e-8, source=src),
                              workspace=ws)
            q = float(np.sum(st.u[:, 0] * dom.jac))
            lo, hi = min(lo, q), max(hi, q)
            if k >= 20:
                acc.add_frame(st.u, dt=dt)
        return acc.profile(nu=nu), (lo / q0 - 1.0, hi / q0 - 1.0)

    prof, drift = run(state.u)
    ok_flux = max(abs(drift[0]), abs(drift[1])) <= 0.05

    perm = _mirror_perm(dom)
    flip = np.array([1.0, -1.0, 1.0])
    prof_m, _ = run(state.u[perm] * flip)
    mean, mean_m = prof.mean, prof_m.mean
    mir_err = max(
        np.abs(mean_m[::-1, 0] - mean[:, 0]).max()
        / np.abs(mean[:, 0]).max(),
        np.abs(mean_m[::-1, 1] + mean[:, 1]).max()
        / max(np.abs(mean).max(), 1e-30),
        np.abs(prof_m.cov[::-1, 0, 0] - prof.cov[:, 0, 0]).max()
        / np.abs(prof.cov[:, 0, 0]).max())
    ok_mirror = mir_err <= 1e-6
    elapsed = time.perf_counter() - t0
    _verdict(10, "channel-property",
             ok_recl and ok_flux and ok_mirror and elapsed < 300.0,
             f"Re_cl {re_cl:.1f} (need ~15037), bulk flux drift "
             f"[{drift[0]:+.2%}, {drift[1]:+.2%}] over 100 steps (need "
             f"within +/-5%), mirrored-statistics rel err {mir_err:.2e}, "
             f"{elapsed:.0f}s (need <300s)")


# ---------------------------------------------------------------------------
# 11: divergence-free gradient modification


def test_criterion_11_divergence_free_gradient_modification():
    rng = np.random.default_rng(47)
    worst = 0.0
    for dom in (mesh.make_box((8, 8)),
                mesh.make_poiseuille((6, 6), distort=0.25)):
        g = rng.standard_normal((dom.n, 2))
        out0 = div_free_grad_mod(dom, g, lam=0.0)
        assert np.array_equal(out0, g)          # lambda=0 is the identity

        phi = rng.standard_normal(dom.n)
        a_like = 0.5 + rng.random(dom.n)
        gp = wide_grad(dom, phi, "mirror")
        cand = a_like[:, None] * np.einsum("nji,nj->ni", dom.tmat, gp)
        tol = 1e-11
        out = div_free_grad_mod(dom, cand, a_like=a_like, lam=1.0, tol=tol)
        bc0 = [np.zeros((f.m, dom.dim)) for f in dom.bfaces]
        scale = np.abs(divergence_rhs(dom, cand, bc0)).max()
        resid = np.abs(divergence_rhs(dom, out, bc0)).max()
        worst = max(worst, resid / (tol * max(scale, 1.0)))
    _verdict(11, "div-free-grad-mod", worst <= 10.0,
             f"projected-gradient divergence {worst:.2f}x solver tolerance "
             "(need <=10x); lambda=0 identity exact")
