"""Reverse-mode differentiation of the pressure-implicit step.

Every forward stage recorded in a :class:`~pisoflow.piso.StepTape` has a
hand-written backward kernel here; chaining them last-to-first yields exact
cotangents of the discrete step (to solver tolerance) with respect to the
previous velocities, the viscosity, the body force, and the prescribed
boundary velocities.

The two linear solves can be excluded from the backward sweep via
:class:`GradientPath`: the cheap "bypass" contributions (everything that is
plain per-cell algebra) are always kept, while the momentum transpose solve
and the pressure adjoint solve are switched on per path. Gradients of an
approximation are still often good enough to descend; the selectable paths
make that trade measurable.
"""

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .linalg import bicgstab_solve, cg_solve, outer_on_pattern, SystemPattern
from .piso import (divergence_rhs, face_grad_adjoint,
                   fetch_axis_trailing_adjoint, wide_grad, wide_grad_adjoint,
                   _boundary_cross_term, _has_cross_terms)


class GradientPath(Enum):
    FULL = "full"
    ADV_ONLY = "adv_only"
    P_ONLY = "p_only"
    NONE = "none"

    @classmethod
    def parse(cls, name):
        for p in cls:
            if p.value == str(name).strip().lower():
                return p
        raise ValueError(f"unknown gradient path {name!r}; choose from "
                         + ", ".join(p.value for p in cls))

    @property
    def pressure_solve(self):
        return self in (GradientPath.FULL, GradientPath.P_ONLY)

    @property
    def advection_solve(self):
        return self in (GradientPath.FULL, GradientPath.ADV_ONLY)


@dataclass
class GradState:
    """Cotangents with the shapes of the matching state fields."""
    u: np.ndarray
    p: np.ndarray
    nu: float = 0.0
    source: np.ndarray = None
    bc: list = None
    solve_iterations: int = 0

    @classmethod
    def zeros(cls, domain):
        n, d = domain.n, domain.dim
        return cls(u=np.zeros((n, d)), p=np.zeros(n), nu=0.0,
                   source=np.zeros((n, d)),
                   bc=[np.zeros((f.m, d)) for f in domain.bfaces])


# ---------------------------------------------------------------------------
# stage kernels
#
# Conventions: dA is the cotangent of the momentum diagonal A, dC of the full
# momentum matrix values (on the shared pattern), dP of the pressure matrix
# values. Cotangents accumulate additively; every kernel is safe to call with
# zero inputs and returns zeros then.


def backward_correct_velocity(domain, p, a_diag, cot_u):
    """Reverse of  u = h - A^-1 T^t grad_xi(p).

    Returns (dA, dp, dh). The A sensitivity comes from the A^-1 factor on
    the projection term; h passes the cotangent straight through.
    """
    a_inv = 1.0 / a_diag
    gp = wide_grad(domain, p, "mirror")
    ep = np.einsum("nji,nj->ni", domain.tmat, gp)
    dA = np.einsum("ni,ni->n", cot_u, ep) * a_inv ** 2
    cot_e = -a_inv[:, None] * cot_u
    cot_gp = np.einsum("nji,ni->nj", domain.tmat, cot_e)
    dp = wide_grad_adjoint(domain, cot_gp, "mirror")
    return dA, dp, cot_u.copy()


def backward_pressure_solve(domain, p_data, p_sol, cot_p, tol=None,
                            maxiter=None, ilu=None, reports=None):
    """Adjoint of the zero-mean pressure solve  P p = b.

    The solve pins p to zero mean, so the incoming cotangent is projected
    first; P is symmetric, so the transpose solve reuses the same matrix.
    Returns (dP on-pattern values, db).
    """
    pat = domain.pattern
    chat = cot_p - cot_p.mean()
    if not np.any(chat):
        return np.zeros(pat.nnz), np.zeros(domain.n)
    neg = -p_data
    y, rep = cg_solve(pat, neg, chat, tol=tol, maxiter=maxiter,
                      precond=ilu if ilu is not None else "ilu0",
                      zero_mean=True, stage="adjoint_pressure")
    if reports is not None:
        reports.append(rep)
    # forward solved (-P) p = proj(-b):  d(-P) = -y p^t,  db = -y
    return outer_on_pattern(pat, y, p_sol), -y


def backward_pressure_matrix(domain, a_inv, dP):
    """Chain dP through the face-mean assembly back to the diagonal A."""
    d, n = domain.dim, domain.n
    pat = domain.pattern
    cot_diag = dP[pat.diag_pos]
    g_ainv = np.zeros(n)
    prod_alpha = domain.alpha[:, np.arange(d), np.arange(d)]
    for a in range(d):
        for s in (0, 1):
            mask = domain.nbr[a, s] >= 0
            cot_off = np.zeros(n)
            cot_off[mask] = dP[domain.nb_slot[a, s, mask]]
            cot_pf = cot_off - np.where(mask, cot_diag, 0.0)
            g_ainv += 0.5 * cot_pf * prod_alpha[:, a]
            alpha_nb = domain.fetch_tensor_quantity(domain.alpha, a, s, a, a)
            contrib = 0.5 * cot_pf * alpha_nb
            idx = domain.nbr[a, s]
            np.add.at(g_ainv, idx[mask], contrib[mask])
    return -a_inv ** 2 * g_ainv


def _adj_divergence_rhs(domain, cot_b):
    """Adjoint of divergence_rhs in (h, bc). Returns (dh, dbc list)."""
    d, n = domain.dim, domain.n
    g_flux = np.zeros((n, d))
    for a in range(d):
        for s in (0, 1):
            mask = domain.nbr[a, s] >= 0
            nsgn = 1.0 if s == 1 else -1.0
            cf = 0.5 * nsgn * np.where(mask, cot_b, 0.0)
            g_flux[:, a] += cf
            fetch_axis_trailing_adjoint(domain, g_flux, cf, a, s, a)
    dh = domain.jac[:, None] * np.einsum("naj,na->nj", domain.tmat, g_flux)
    dbc = []
    for f in domain.bfaces:
        coef = f.nsign * f.face_jac * cot_b[f.cells]
        dbc.append(coef[:, None] * f.face_t[:, f.axis, :])
    return dh, dbc


def _adj_pressure_cross(domain, a_inv, p_prev, cot_out):
    """Adjoint of the deferred non-orthogonal pressure fluxes.

    Returns (dp_prev, d_ainv)."""
    d, n = domain.dim, domain.n
    if not _has_cross_terms(domain):
        return np.zeros(n), np.zeros(n)
    g = wide_grad(domain, p_prev, "onesided")
    diag_a = domain.alpha[:, np.arange(d), np.arange(d)]
    q = np.einsum("nak,nk->na", domain.alpha, g) - diag_a * g
    cot_x = np.zeros((n, d))
    for a in range(d):
        for s in (0, 1):
            mask = domain.nbr[a, s] >= 0
            nsgn = 1.0 if s == 1 else -1.0
            cf = 0.5 * nsgn * np.where(mask, cot_out, 0.0)
            cot_x[:, a] += cf
            fetch_axis_trailing_adjoint(domain, cot_x, cf, a, s, a)
    d_ainv = np.einsum("na,na->n", cot_x, q)
    cw = a_inv[:, None] * cot_x
    cot_g = np.einsum("nak,na->nk", domain.alpha, cw) - diag_a * cw
    dp_prev = wide_grad_adjoint(domain, cot_g, "onesided")
    return dp_prev, d_ainv


def _adj_momentum_cross(domain, u_cross, nu, cot_out):
    """Adjoint of the deferred non-orthogonal viscous fluxes.

    Returns (du_cross, dnu)."""
    d, n = domain.dim, domain.n
    if not _has_cross_terms(domain):
        return np.zeros_like(cot_out), 0.0
    g = wide_grad(domain, u_cross, "onesided")        # (n, d_ax, d_comp)
    diag_a = domain.alpha[:, np.arange(d), np.arange(d)]
    x = nu * np.einsum("nak,nkc->nac", domain.alpha, g)
    x -= nu * diag_a[:, :, None] * g
    cot_face = cot_out / domain.jac[:, None]
    cot_x = np.zeros_like(x)
    for a in range(d):
        for s in (0, 1):
            mask = domain.nbr[a, s] >= 0
            nsgn = 1.0 if s == 1 else -1.0
            cf = 0.5 * nsgn * np.where(mask[:, None], cot_face, 0.0)
            cot_x[:, a] += cf
            fetch_axis_trailing_adjoint(domain, cot_x, cf, a, s, a)
    dnu = float(np.vdot(cot_x, x) / nu)
    cot_g = nu * np.einsum("nak,nac->nkc", domain.alpha, cot_x)
    cot_g -= nu * diag_a[:, :, None] * cot_x
    du_cross = wide_grad_adjoint(domain, cot_g, "onesided")
    return du_cross, dnu


def _face_cross_active(f):
    fa = f.face_alpha
    off = fa[:, f.axis, :].copy()
    off[:, f.axis] = 0.0
    return np.abs(off).max() > 1e-14 * max(np.abs(fa).max(), 1e-300)


def _adj_boundary_cross(domain, f, ub, nu, cot_rows):
    """Adjoint of the tangential-derivative viscous boundary flux.

    Returns (dub, dnu); zero when the face metric has no off-diagonals."""
    d = domain.dim
    if not _face_cross_active(f):
        return np.zeros_like(ub), 0.0
    a = f.axis
    term = _boundary_cross_term(domain, f, ub, nu)
    dnu = float(np.vdot(cot_rows, term) / nu)
    scale = (f.nsign * nu / domain.jac[f.cells])[:, None]
    cot_pre = cot_rows * scale
    face_axes = [k for k in range(d) if k != a]
    dub = np.zeros_like(ub)
    for q, k in enumerate(face_axes):
        cot_dub = f.face_alpha[:, a, k][:, None] * cot_pre
        dub += face_grad_adjoint(
            cot_dub.reshape(f.area_shape + (d,)), q).reshape(f.m, d)
    return dub, dnu


def _adj_momentum_rhs(domain, tape, cot_rhs):
    """Adjoint of momentum_rhs in (u_n, source, nu, bc, u_cross).

    The cotangent of the lagged cross-flux input is returned separately so
    the caller can route it to u_n or to the previous outer iterate."""
    dt, nu, bc = tape.dt, tape.nu, tape.bc
    du_n = cot_rhs / dt
    dsource = cot_rhs.copy()
    dnu = 0.0
    dbc = [np.zeros_like(b) for b in bc]
    invj = 1.0 / domain.jac
    for i, f in enumerate(domain.bfaces):
        ub = bc[i]
        cr = cot_rhs[f.cells]
        t_row = f.face_t[:, f.axis, :]
        uflux = f.face_jac * np.einsum("mj,mj->m", t_row, ub)
        cr_dot_ub = np.einsum("mj,mj->m", cr, ub)
        if f.kind == "dirichlet":
            fa = f.face_alpha[:, f.axis, f.axis]
            coef = (2.0 * nu * fa - uflux * f.nsign) * invj[f.cells]
            dnu += float(np.sum(cr_dot_ub * 2.0 * fa * invj[f.cells]))
            cot_uflux = -f.nsign * invj[f.cells] * cr_dot_ub
            dbc[i] += cr * coef[:, None]
            dbc[i] += (cot_uflux * f.face_jac)[:, None] * t_row
            dub_x, dnu_x = _adj_boundary_cross(domain, f, ub, nu, cr)
            dbc[i] += dub_x
            dnu += dnu_x
        else:
            coef = -uflux * f.nsign * invj[f.cells]
            cot_uflux = -f.nsign * invj[f.cells] * cr_dot_ub
            dbc[i] += cr * coef[:, None]
            dbc[i] += (cot_uflux * f.face_jac)[:, None] * t_row
    return du_n, dsource, dnu, dbc


def backward_pressure_rhs(domain, tape, m, dh, ddiv):
    """Reverse sweep of one corrector's h and divergence stage.

    Forward map:  h = A^-1 (rhs - H u_hin),  b0 = div(h) + boundary fluxes,
    with rhs the final predictor right-hand side. Returns a dict with the
    cotangents u_n, u_hin, u_cross, source, nu, A, H (on-pattern, zero
    diagonal), and bc. The matrix values C are treated as an independent
    input here; their own dependence on u_n is the predictor's business.
    """
    corr = tape.correctors[m]
    pat = domain.pattern
    a_diag = tape.a_diag
    a_inv = 1.0 / a_diag
    g_div_h, dbc_div = _adj_divergence_rhs(domain, ddiv)
    g_h = dh + g_div_h
    dA = -a_inv * np.einsum("nc,nc->n", g_h, corr.h)
    grhs = a_inv[:, None] * g_h
    cot_hu = -grhs
    dH = np.zeros(pat.nnz)
    du_hin = np.empty_like(g_h)
    for c in range(domain.dim):
        outer_on_pattern(pat, cot_hu[:, c], corr.u_hin[:, c], out=dH)
        du_hin[:, c] = (pat.matvec(pat.transpose_data(tape.c_data),
                                   cot_hu[:, c])
                        - a_diag * cot_hu[:, c])
    dH[pat.diag_pos] = 0.0        # H has an empty diagonal by construction
    du_n, dsource, dnu, dbc = _adj_momentum_rhs(domain, tape, grhs)
    du_cross, dnu_x = _adj_momentum_cross(domain, tape.mom_inputs[-1],
                                          tape.nu, grhs)
    for i in range(len(dbc)):
        dbc[i] += dbc_div[i]
    return {"u_n": du_n, "u_hin": du_hin, "u_cross": du_cross,
            "source": dsource, "nu": dnu + dnu_x, "A": dA, "H": dH,
            "bc": dbc}


def _adj_assemble_momentum(domain, tape, dC):
    """Adjoint of the matrix assembly in (u_n, nu)."""
    d, n = domain.dim, domain.n
    pat = domain.pattern
    nu = tape.nu
    invj = 1.0 / domain.jac
    cot_diag = dC[pat.diag_pos]
    g_flux = np.zeros((n, d))
    dnu = 0.0
    for a in range(d):
        alpha_aa = domain.alpha[:, a, a]
        for s in (0, 1):
            mask = domain.nbr[a, s] >= 0
            nsgn = 1.0 if s == 1 else -1.0
            cot_off = np.zeros(n)
            cot_off[mask] = dC[domain.nb_slot[a, s, mask]]
            cd = np.where(mask, cot_diag, 0.0)
            cot_adv = cot_off + cd
            cot_visc = cd - cot_off
            alpha_nb = domain.fetch_tensor_quantity(domain.alpha, a, s, a, a)
            dnu += float(np.sum(cot_visc * 0.5 * (alpha_aa
                                                  + np.where(mask, alpha_nb,
                                                             0.0)) * invj))
            cot_fmean = 0.5 * nsgn * invj * cot_adv
            g_flux[:, a] += 0.5 * cot_fmean
            fetch_axis_trailing_adjoint(domain, g_flux, 0.5 * cot_fmean,
                                        a, s, a)
    for f in domain.bfaces:
        if f.kind == "dirichlet":
            dnu += float(np.sum(cot_diag[f.cells]
                                * 2.0 * f.face_alpha[:, f.axis, f.axis]
                                * invj[f.cells]))
    du_n = domain.jac[:, None] * np.einsum("naj,na->nj", domain.tmat, g_flux)
    return du_n, dnu


def backward_predictor(domain, tape, du_star, dc_ext=None, grhs_extra=None,
                       include_solve=True, tol=None, maxiter=None,
                       reports=None):
    """Reverse sweep of the predictor: transpose solves per outer iteration,
    matrix gradient, right-hand-side chain, and the assembly adjoint.

    ``dc_ext`` carries matrix-value cotangents accumulated by later stages;
    they are merged before the assembly adjoint. ``grhs_extra`` is the
    cotangent of the final right-hand side coming from the corrector stage
    (always applied, gate or not). Returns a dict with u_n, source, nu, bc.
    """
    pat = domain.pattern
    n_outer = len(tape.mom_iters)
    dC = np.zeros(pat.nnz) if dc_ext is None else dc_ext.copy()
    du_n = np.zeros_like(tape.u_n)
    dsource = np.zeros_like(tape.u_n)
    dnu = 0.0
    dbc = [np.zeros_like(b) for b in tape.bc]
    iters = 0

    ct_data = ct_ilu = None
    if include_solve:
        ct_data = pat.transpose_data(tape.c_data)
        ct_ilu = pat.factorize(ct_data)

    cot_us = np.array(du_star, dtype=np.float64, copy=True)
    for it in reversed(range(n_outer)):
        grhs = np.zeros_like(cot_us)
        if include_solve and np.any(cot_us):
            for c in range(domain.dim):
                y, rep = bicgstab_solve(
                    pat, ct_data, cot_us[:, c], tol=tol, maxiter=maxiter,
                    precond=ct_ilu, stage=f"adjoint_momentum[{c}]")
                grhs[:, c] = y
                iters += rep.iterations
                if reports is not None:
                    reports.append(rep)
                outer_on_pattern(pat, -y, tape.mom_iters[it][:, c], out=dC)
        if it == n_outer - 1 and grhs_extra is not None:
            grhs = grhs + grhs_extra
        if np.any(grhs):
            r_un, r_src, r_nu, r_bc = _adj_momentum_rhs(domain, tape, grhs)
            du_n += r_un
            dsource += r_src
            dnu += r_nu
            for i in range(len(dbc)):
                dbc[i] += r_bc[i]
            du_cross, dnu_x = _adj_momentum_cross(
                domain, tape.mom_inputs[it], tape.nu, grhs)
            dnu += dnu_x
            if it == 0:
                du_n += du_cross
                cot_us = np.zeros_like(cot_us)
            else:
                cot_us = du_cross
        else:
            cot_us = np.zeros_like(cot_us)

    asm_un, asm_nu = _adj_assemble_momentum(domain, tape, dC)
    du_n += asm_un
    dnu += asm_nu
    return {"u_n": du_n, "source": dsource, "nu": dnu, "bc": dbc,
            "iterations": iters}


# ---------------------------------------------------------------------------
# the full step, reversed


def backward_step(domain, tape, cot, path=GradientPath.FULL, tol=None,
                  maxiter=None):
    """Chain all backward kernels through one recorded step.

    ``cot`` carries the cotangents of the step's outputs (u and p of the new
    state). Returns a :class:`GradState` with cotangents of the inputs; the
    input pressure only seeds warm starts, so its cotangent is zero.
    """
    if tape is None or tape.u_n is None:
        raise ValueError("backward_step needs a recorded tape")
    if isinstance(path, str):
        path = GradientPath.parse(path)
    pat = domain.pattern
    n, d = domain.n, domain.dim
    a_diag = tape.a_diag
    a_inv = 1.0 / a_diag
    n_corr = len(tape.correctors)
    n_outer = len(tape.mom_iters)
    reports = []

    dC = np.zeros(pat.nnz)
    dP = np.zeros(pat.nnz)
    dA = np.zeros(n)
    g_rhs = np.zeros((n, d))
    dnu = 0.0
    dsource = np.zeros((n, d))
    dbc = [np.zeros((f.m, d)) for f in domain.bfaces]
    ct_data = pat.transpose_data(tape.c_data)

    p_ilu = None
    if path.pressure_solve:
        p_ilu = pat.factorize(-tape.p_data)

    cu = np.array(cot.u, dtype=np.float64, copy=True)
    cp_out = cot.p if cot.p is not None else np.zeros(n)

    for m in reversed(range(n_corr)):
        corr = tape.correctors[m]
        dA_c, cot_p, g_h = backward_correct_velocity(
            domain, corr.p_iters[-1], a_diag, cu)
        dA += dA_c
        if m == n_corr - 1:
            cot_p = cot_p + cp_out

        cot_b0 = np.zeros(n)
        for it in reversed(range(n_outer)):
            if path.pressure_solve and np.any(cot_p):
                dP_it, db = backward_pressure_solve(
                    domain, tape.p_data, corr.p_iters[it], cot_p,
                    tol=tol, maxiter=maxiter, ilu=p_ilu, reports=reports)
                dP += dP_it
            else:
                db = np.zeros(n)
            cot_b0 += db
            if it > 0:
                dp_prev, d_ainv = _adj_pressure_cross(
                    domain, a_inv, corr.p_iters[it - 1], -db)
                cot_p = dp_prev
                dA += -a_inv ** 2 * d_ainv

        g_div_h, dbc_div = _adj_divergence_rhs(domain, cot_b0)
        g_h = g_h + g_div_h
        for i in range(len(dbc)):
            dbc[i] += dbc_div[i]

        # h = A^-1 (rhs - H u_hin)
        dA += -a_inv * np.einsum("nc,nc->n", g_h, corr.h)
        grhs_m = a_inv[:, None] * g_h
        g_rhs += grhs_m
        cot_hu = -grhs_m
        cu = np.empty_like(g_h)
        for c in range(d):
            outer_on_pattern(pat, cot_hu[:, c], corr.u_hin[:, c], out=dC)
            dA -= cot_hu[:, c] * corr.u_hin[:, c]
            cu[:, c] = (pat.matvec(ct_data, cot_hu[:, c])
                        - a_diag * cot_hu[:, c])

    if path.pressure_solve and np.any(dP):
        dA += backward_pressure_matrix(domain, a_inv, dP)

    dC[pat.diag_pos] += dA
    pred = backward_predictor(domain, tape, cu, dc_ext=dC,
                              grhs_extra=g_rhs,
                              include_solve=path.advection_solve,
                              tol=tol, maxiter=maxiter, reports=reports)
    iters = sum(rep.iterations for rep in reports)

    du_n = pred["u_n"]
    dnu += pred["nu"]
    dsource += pred["source"]
    for i in range(len(dbc)):
        dbc[i] += pred["bc"][i]

    return GradState(u=du_n, p=np.zeros(n), nu=dnu, source=dsource,
                     bc=dbc, solve_iterations=iters)


def backward_rollout(domain, tapes, cots, path=GradientPath.FULL, tol=None,
                     maxiter=None):
    """Backward through a sequence of recorded steps.

    ``cots[k]`` is the cotangent of the state after step k (entries may be
    None for steps without a direct loss term). Returns a GradState: u is
    the cotangent of the initial velocities; nu, source, and bc accumulate
    across steps since those inputs are shared.
    """
    if len(tapes) != len(cots):
        raise ValueError("need one cotangent slot per recorded step")
    n, d = domain.n, domain.dim
    total = GradState.zeros(domain)
    cu = np.zeros((n, d))
    for k in reversed(range(len(tapes))):
        ck = cots[k]
        if ck is not None:
            cu = cu + ck.u
            cp = ck.p if ck.p is not None else np.zeros(n)
        else:
            cp = np.zeros(n)
        g = backward_step(domain, tapes[k], GradState(u=cu, p=cp),
                          path=path, tol=tol, maxiter=maxiter)
        total.nu += g.nu
        total.source += g.source
        for i in range(len(total.bc)):
            total.bc[i] += g.bc[i]
        total.solve_iterations += g.solve_iterations
        cu = g.u
    total.u = cu
    return total


# ---------------------------------------------------------------------------
# numerical gradient verification


@dataclass
class GradcheckEntry:
    stage: str
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradcheckReport:
    entries: list = field(default_factory=list)
    threshold: float = 1e-4

    @property
    def passed(self):
        return all(e.passed for e in self.entries)

    @property
    def max_rel_err(self):
        return max((e.max_rel_err for e in self.entries), default=0.0)

    def text(self):
        lines = []
        for e in self.entries:
            lines.append(f"stage={e.stage} input={e.name} "
                         f"max_rel_err={e.max_rel_err:.3e} "
                         f"pass={1 if e.passed else 0}")
        return "\n".join(lines)


def gradcheck(fn, inputs, eps=None, mode="central", threshold=1e-4,
              stage="map"):
    """Compare analytic gradients against finite differences.

    ``fn`` maps a dict of named float arrays (or scalars) to
    ``(loss, grads)`` where grads mirrors the input names. Every element of
    every input is perturbed; the relative error uses a floor of 10% of the
    largest gradient magnitude per input so that near-zero entries are
    judged against the input's own scale.
    """
    base = {k: np.atleast_1d(np.array(v, dtype=np.float64))
            for k, v in inputs.items()}
    scalar = {k: np.shape(v) == () for k, v in inputs.items()}

    def call():
        return fn({k: (float(v[0]) if scalar[k] else v)
                   for k, v in base.items()})[0]

    loss0, grads = fn(inputs)
    report = GradcheckReport(threshold=threshold)
    cube = float(np.cbrt(np.finfo(np.float64).eps))
    for name, arr in base.items():
        g_an = np.atleast_1d(np.asarray(grads[name], dtype=np.float64))
        g_fd = np.zeros_like(arr, dtype=np.float64)
        flat = arr.reshape(-1)
        fd_flat = g_fd.reshape(-1)
        for idx in range(flat.size):
            h = (eps if eps is not None
                 else cube * max(1.0, abs(flat[idx])))
            orig = flat[idx]
            flat[idx] = orig + h
            lp = call()
            if mode == "central":
                flat[idx] = orig - h
                fd_flat[idx] = (lp - call()) / (2.0 * h)
            else:
                fd_flat[idx] = (lp - loss0) / h
            flat[idx] = orig
        scale = max(np.abs(g_an).max(), np.abs(g_fd).max(), 1e-12)
        denom = np.maximum(np.abs(g_fd.reshape(g_an.shape)), 0.1 * scale)
        err = np.abs(g_an - g_fd.reshape(g_an.shape)) / denom
        worst = float(err.max()) if err.size else 0.0
        if not np.isfinite(g_an).all() or not np.isfinite(g_fd).all():
            report.entries.append(GradcheckEntry(stage, name, float("inf"),
                                                 False))
        else:
            report.entries.append(GradcheckEntry(stage, name, worst,
                                                 worst <= threshold))
    return report


# ---------------------------------------------------------------------------
# divergence-free gradient modification


def _flux_div_matrix(domain):
    """Sparse matrix taking a flat (n*d,) cell-velocity vector to the
    face-interpolated flux divergence (same stencil as divergence_rhs with
    zero boundary fluxes)."""
    import scipy.sparse as sp
    d, n = domain.dim, domain.n
    jtm = domain.jac[:, None, None] * domain.tmat      # flux = jtm @ u
    rows, cols, vals = [], [], []
    cell = np.arange(n, dtype=np.int64)
    for a in range(d):
        for s in (0, 1):
            mask = domain.nbr[a, s] >= 0
            nsgn = 1.0 if s == 1 else -1.0
            i = cell[mask]
            j = domain.nbr[a, s, mask]
            ax = domain.nbr_ax[a, s, mask, a].astype(np.int64)
            sg = domain.nbr_sign[a, s, mask, a]
            for k in range(d):
                rows.append(i)
                cols.append(i * d + k)
                vals.append(np.full(i.size, 0.5 * nsgn) * jtm[i, a, k])
                rows.append(i)
                cols.append(j * d + k)
                vals.append(0.5 * nsgn * sg * jtm[j, ax, k])
    return sp.coo_matrix(
        (np.concatenate(vals),
         (np.concatenate(rows), np.concatenate(cols))),
        shape=(n, n * d)).tocsr()


def _correction_matrix(domain, a_like):
    """Sparse matrix taking a cell pressure to the flat correction field
    a_like * T^t grad_xi(p) with mirror ghosts, matching correct_velocity."""
    import scipy.sparse as sp
    d, n = domain.dim, domain.n
    w = a_like[:, None, None] * domain.tmat            # (n, j, i)
    cell = np.arange(n, dtype=np.int64)
    rows, cols, vals = [], [], []
    for j in range(d):
        hi = domain.nbr[j, 1]
        lo = domain.nbr[j, 0]
        hi_t = np.where(hi >= 0, hi, cell)
        lo_t = np.where(lo >= 0, lo, cell)
        for i in range(d):
            rows.append(cell * d + i)
            cols.append(hi_t)
            vals.append(0.5 * w[:, j, i])
            rows.append(cell * d + i)
            cols.append(lo_t)
            vals.append(-0.5 * w[:, j, i])
    return sp.coo_matrix(
        (np.concatenate(vals),
         (np.concatenate(rows), np.concatenate(cols))),
        shape=(n * d, n)).tocsr()


def _pattern_from_scipy(mat, n):
    """SystemPattern + aligned values from a scipy matrix, with the pattern
    symmetrized and the diagonal made explicit (zeros where absent)."""
    coo = mat.tocoo()
    cell = np.arange(n, dtype=np.int64)
    rows = np.concatenate([coo.row.astype(np.int64), coo.col.astype(np.int64),
                           cell])
    cols = np.concatenate([coo.col.astype(np.int64), coo.row.astype(np.int64),
                           cell])
    vals = np.concatenate([coo.data, np.zeros(coo.data.size),
                           np.zeros(n)])
    keys = rows * n + cols
    order = np.argsort(keys, kind="stable")
    keys, rows, cols, vals = keys[order], rows[order], cols[order], vals[order]
    uniq, start = np.unique(keys, return_index=True)
    summed = np.add.reduceat(vals, start)
    urows = rows[start]
    ucols = cols[start]
    pat = SystemPattern(n, urows, ucols)
    data = np.zeros(pat.nnz)
    data[pat.entry_pos(urows, ucols)] = summed
    return pat, data


def div_free_grad_mod(domain, grad_u, a_like=None, lam=1.0, tol=None,
                      maxiter=None):
    """Remove (a multiple of) the divergent part of a velocity-shaped field.

    Solves the composite system  div(a_like * T^t grad q) = div(grad_u)
    built from the exact discrete operators, then returns
    ``grad_u - lam * a_like * T^t grad(q)``. With lam=1 the returned field
    has face-interpolated divergence at the solver-residual level whenever
    the right-hand side is consistent; lam=0 returns the input unchanged.
    """
    if lam == 0.0:
        return np.array(grad_u, dtype=np.float64, copy=True)
    n, d = domain.n, domain.dim
    a_like = np.ones(n) if a_like is None else np.asarray(a_like, np.float64)
    dmat = _flux_div_matrix(domain)
    gmat = _correction_matrix(domain, a_like)
    lap = (dmat @ gmat).tocsr()
    pat, data = _pattern_from_scipy(lap, n)
    bc0 = [np.zeros((f.m, d)) for f in domain.bfaces]
    b = divergence_rhs(domain, np.asarray(grad_u, np.float64), bc0)
    sym = np.abs(data - pat.transpose_data(data)).max()
    symmetric = sym <= 1e-12 * max(np.abs(data).max(), 1e-300)
    solve = cg_solve if symmetric else bicgstab_solve
    q, rep = solve(pat, data, b, tol=tol, maxiter=maxiter,
                   zero_mean=True, stage="div_free_grad_mod")
    corr = (gmat @ q).reshape(n, d)
    return np.asarray(grad_u, np.float64) - lam * corr
