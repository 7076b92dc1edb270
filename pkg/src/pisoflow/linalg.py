"""Sparse patterns and iterative solvers used by the flow solver.

A :class:`SystemPattern` wraps the kernel-lane CSR pattern together with the
bookkeeping the solver needs: diagonal slots, a transpose permutation (the
pattern is always structurally symmetric here), and the row index of every
stored entry. Solvers are plain preconditioned CG / BiCGStab over the kernel
matvec; singular consistent systems (the pressure Poisson operator with pure
flux boundaries) are handled by projecting onto the zero-mean subspace.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels


class SolverError(RuntimeError):
    """Raised when a linear solve fails even after the fallback retry."""

    def __init__(self, report):
        self.report = report
        super().__init__(
            f"linear solve '{report.stage}' failed: residual "
            f"{report.residual:.3e} after {report.iterations} iterations"
            + (" (fallback tried)" if report.fallback_used else ""))


@dataclass
class SolverReport:
    converged: bool
    iterations: int
    residual: float
    fallback_used: bool = False
    stage: str = ""


class SystemPattern:
    """Fixed sparsity pattern of one structurally symmetric system."""

    def __init__(self, n, rows, cols):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        order = np.lexsort((cols, rows))
        rows, cols = rows[order], cols[order]
        if rows.size > 1:
            same = (rows[1:] == rows[:-1]) & (cols[1:] == cols[:-1])
            if same.any():
                raise ValueError("duplicate entries in sparsity pattern")
        self.n = int(n)
        self.nnz = rows.size
        self.indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(self.indptr, rows + 1, 1)
        np.cumsum(self.indptr, out=self.indptr)
        self.indices = cols
        self.rows = rows
        dp = self.entry_pos(np.arange(n, dtype=np.int64),
                            np.arange(n, dtype=np.int64))
        if (dp < 0).any():
            raise ValueError("pattern is missing diagonal entries")
        self.diag_pos = dp
        # transpose permutation: entry (i, j) maps to the slot of (j, i)
        self.sym_perm = self.entry_pos(cols, rows)
        if (self.sym_perm < 0).any():
            raise ValueError("pattern is not structurally symmetric")
        self._kernel_pat = kernels.make_pattern(self.indptr, self.indices,
                                                self.diag_pos)

    def entry_pos(self, rows, cols):
        """Flat data positions of (row, col) queries; -1 where absent."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        # entries are sorted by (row, col), so one global sorted key suffices
        keys = self.rows * self.n + self.indices
        pos = np.searchsorted(keys, rows * self.n + cols)
        at = np.minimum(pos, self.nnz - 1)
        ok = (pos < self.nnz) & (keys[at] == rows * self.n + cols)
        return np.where(ok, pos, -1)

    def matvec(self, data, x, out=None):
        # the compiled kernel wants contiguous buffers; column views are not
        return kernels.matvec(self._kernel_pat, np.ascontiguousarray(data),
                              np.ascontiguousarray(x), out=out)

    def transpose_data(self, data):
        return data[self.sym_perm]

    def factorize(self, data, pivot_floor=1e-12):
        lu, fixups = kernels.ilu0_factor(self._kernel_pat, data, pivot_floor)
        return Ilu0(self, lu, fixups)

    def scipy_csr(self, data):
        import scipy.sparse as sp
        return sp.csr_matrix((data, self.indices, self.indptr),
                             shape=(self.n, self.n))


class Ilu0:
    """ILU(0) factors on a :class:`SystemPattern`."""

    def __init__(self, pattern, lu, fixups):
        self.pattern = pattern
        self.lu = lu
        self.fixups = int(fixups)

    def apply(self, r, out=None):
        return kernels.ilu0_solve(self.pattern._kernel_pat, self.lu, r,
                                  out=out)


def outer_on_pattern(pattern, left, right, out=None):
    """Entries left[i] * right[j] of an outer product, restricted to pattern."""
    res = left[pattern.rows] * right[pattern.indices]
    if out is None:
        return res
    out += res
    return out


def _project_zero_mean(v):
    v -= v.mean()
    return v


def default_tol(dtype):
    return 1e-5 if np.dtype(dtype) == np.float32 else 1e-8


def _finish(x, converged, it, res, bnorm, fallback, stage):
    rep = SolverReport(converged=bool(converged), iterations=int(it),
                       residual=float(res / bnorm) if bnorm > 0 else 0.0,
                       fallback_used=fallback, stage=stage)
    return x, rep


def _cg_core(pattern, data, b, x, tol_abs, maxiter, precond, zero_mean):
    r = b - pattern.matvec(data, x)
    if zero_mean:
        _project_zero_mean(r)
    res = np.linalg.norm(r)
    if res <= tol_abs:
        return x, True, 0, res
    z = precond.apply(r) if precond is not None else r.copy()
    if zero_mean:
        _project_zero_mean(z)
    p = z.copy()
    rz = float(r @ z)
    for it in range(1, maxiter + 1):
        ap = pattern.matvec(data, p)
        pap = float(p @ ap)
        if not np.isfinite(pap) or abs(pap) < np.finfo(b.dtype).tiny:
            return x, False, it, res
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        res = np.linalg.norm(r)
        if res <= tol_abs:
            if zero_mean:
                _project_zero_mean(x)
            return x, True, it, res
        z = precond.apply(r) if precond is not None else r.copy()
        if zero_mean:
            _project_zero_mean(z)
        rz_new = float(r @ z)
        if not np.isfinite(rz_new) or rz == 0.0:
            return x, False, it, res
        p *= rz_new / rz
        p += z
        rz = rz_new
    return x, False, maxiter, res


def _bicgstab_core(pattern, data, b, x, tol_abs, maxiter, precond):
    r = b - pattern.matvec(data, x)
    res = np.linalg.norm(r)
    if res <= tol_abs:
        return x, True, 0, res
    rhat = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    tiny = np.finfo(b.dtype).tiny
    for it in range(1, maxiter + 1):
        rho_new = float(rhat @ r)
        if abs(rho_new) < tiny or abs(omega) < tiny:
            return x, False, it, res
        beta = (rho_new / rho) * (alpha / omega)
        p = r + beta * (p - omega * v)
        phat = precond.apply(p) if precond is not None else p
        v = pattern.matvec(data, phat)
        denom = float(rhat @ v)
        if abs(denom) < tiny:
            return x, False, it, res
        alpha = rho_new / denom
        s = r - alpha * v
        res = np.linalg.norm(s)
        if res <= tol_abs:
            x += alpha * phat
            return x, True, it, res
        shat = precond.apply(s) if precond is not None else s
        t = pattern.matvec(data, shat)
        tt = float(t @ t)
        if tt < tiny:
            return x, False, it, res
        omega = float(t @ s) / tt
        x = x + alpha * phat + omega * shat
        r = s - omega * t
        res = np.linalg.norm(r)
        if res <= tol_abs:
            return x, True, it, res
        rho = rho_new
    return x, False, maxiter, res


def _run_with_fallback(core, pattern, data, b, x0, tol, maxiter, precond,
                       stage, raise_on_fail, **kw):
    bnorm = float(np.linalg.norm(b))
    dtype = b.dtype
    if tol is None:
        tol = default_tol(dtype)
    if bnorm == 0.0:
        return _finish(np.zeros_like(b), True, 0, 0.0, 1.0, False, stage)
    tol_abs = tol * bnorm
    if maxiter is None:
        maxiter = max(200, 40 * int(round(pattern.n ** (1.0 / 2))))

    x = np.zeros_like(b) if x0 is None else x0.astype(dtype, copy=True)
    if precond == "ilu0":
        pc = pattern.factorize(data)
    elif isinstance(precond, Ilu0):
        pc = precond
    else:
        pc = None
    x, ok, it, res = core(pattern, data, b, x, tol_abs, maxiter, pc, **kw)
    if ok:
        # recurrence residuals can drift from the truth when the
        # preconditioner is near singular; never trust them unverified
        res = float(np.linalg.norm(b - pattern.matvec(data, x)))
        ok = res <= 10.0 * tol_abs
    fallback = False
    if not ok and pc is not None:
        # retry unpreconditioned from scratch: an ILU breakdown can poison
        # the Krylov space in ways a warm start would inherit
        fallback = True
        x = np.zeros_like(b)
        x, ok, it2, res = core(pattern, data, b, x, tol_abs, 2 * maxiter,
                               None, **kw)
        it += it2
        if ok:
            res = float(np.linalg.norm(b - pattern.matvec(data, x)))
            ok = res <= 10.0 * tol_abs
    xr = _finish(x, ok, it, res, bnorm, fallback, stage)
    if not ok and raise_on_fail:
        raise SolverError(xr[1])
    return xr


def cg_solve(pattern, data, b, x0=None, tol=None, maxiter=None,
             precond="ilu0", zero_mean=False, stage="cg",
             raise_on_fail=True):
    """Preconditioned conjugate gradients for SPD systems.

    With ``zero_mean=True`` the system is treated as singular with a
    constant nullspace: the right-hand side is projected onto zero mean,
    iterates are kept in that subspace, and the solution is pinned to
    zero mean.
    """
    b = np.asarray(b)
    if zero_mean:
        b = b - b.mean()
    return _run_with_fallback(_cg_core, pattern, data, b, x0, tol, maxiter,
                              precond, stage, raise_on_fail,
                              zero_mean=zero_mean)


def bicgstab_solve(pattern, data, b, x0=None, tol=None, maxiter=None,
                   precond="ilu0", stage="bicgstab", raise_on_fail=True):
    """Preconditioned BiCGStab for general (nonsymmetric) systems."""
    return _run_with_fallback(_bicgstab_core, pattern, data,
                              np.asarray(b), x0, tol, maxiter, precond,
                              stage, raise_on_fail)
